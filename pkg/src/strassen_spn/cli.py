"""Command-line interface: ``strassen-spn <command> ...``.

Exit codes: 0 success, 1 validation failure (or inexact / not found),
2 usage error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import budget as bud
from . import io as sio
from .errors import SpnError, TrainingDiverged, ValidationError
from .kernel import MultCounter, export_model
from .strassen import BilinearSolution, SearchPlan, search, verify_exact
from .training import KdConfig, TrainPhasePlan, metrics_jsonl, run_training

SEED_ENV = "STRASSENNET_SEED"
FIXTURES = ("strassen", "found")

logger = logging.getLogger("strassen_spn")


def resolve_seed(arg: Optional[int], fallback: int = 0) -> int:
    """``--seed`` wins, then ``$STRASSENNET_SEED``, then ``fallback``."""
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return fallback
    try:
        return int(env, 0)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from None


def _digest(doc) -> str:
    return hashlib.sha256(sio.canonical_json(doc).encode()).hexdigest()


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        sio.atomic_write(out, text)
    else:
        sys.stdout.write(text)


def bundled_text(*parts: str) -> str:
    return resources.files("strassen_spn").joinpath(*parts).read_text()


# ---------------------------------------------------------------------------
# strassen search / verify
# ---------------------------------------------------------------------------


def cmd_strassen(args) -> int:
    if args.action == "verify":
        if args.fixture:
            doc = json.loads(bundled_text("data", f"{args.fixture}.json"))
        elif args.input:
            doc = sio.read_json(args.input)
        else:
            raise ValidationError("verify needs --in FILE or --fixture NAME")
        sol = BilinearSolution.from_dict(doc)
        exact = verify_exact(sol)
        print("exact" if exact else "inexact")
        return 0 if exact else 1

    seed = resolve_seed(args.seed)
    plan = SearchPlan(pairs=args.pairs)
    res = search(n=args.n, r=args.rank, restarts=args.restarts, seed=seed, plan=plan, init=args.init,
                 jobs=args.jobs)
    report = {"schema_version": 1, "n": args.n, "r": args.rank, "restarts": args.restarts, "seed": seed,
              "init": args.init, "found": res.found,
              "restart_index": res.solution.restart_index if res.found else None, "restarts_report": res.report}
    report_path = args.report or (str(Path(args.out).with_suffix("")) + ".report.json" if args.out else None)
    if report_path:
        sio.atomic_write(report_path, json.dumps(report, indent=1, sort_keys=True) + "\n")
    if res.found:
        text = json.dumps(dict(res.solution.to_dict(), schema_version=1), sort_keys=True) + "\n"
        _emit(text, args.out)
        print(f"exact solution found at restart {res.solution.restart_index}", file=sys.stderr)
        return 0
    exact = sum(r["exact"] for r in res.report)
    print(f"no exact solution in {args.restarts} restarts ({exact} exact)", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# budget
# ---------------------------------------------------------------------------


def cmd_budget(args) -> int:
    if args.model:
        spec = bud.parse_arch(sio.arch_from_model_doc(sio.read_json(args.model)))
    else:
        spec = bud.load_arch(args.arch)
    report = bud.compare(spec, args.r_ratio, args.p, args.g, count_bn=not args.no_bn)
    text = report.to_csv(args.per_layer) if args.format == "csv" else report.to_json(args.per_layer)
    _emit(text, args.out)
    return 0


# ---------------------------------------------------------------------------
# data / train
# ---------------------------------------------------------------------------


def cmd_data(args) -> int:
    seed = resolve_seed(args.seed)
    paths = sio.write_blobs(args.out, seed=seed, per_class=args.per_class)
    for p in paths:
        print(p)
    return 0


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return json.loads(bundled_text("configs", "blobs-st.json"))
    if not Path(path).exists() and (Path(path).suffix == "" or "/" not in path):
        name = Path(path).stem
        try:
            return json.loads(bundled_text("configs", f"{name}.json"))
        except FileNotFoundError:
            raise ValidationError(f"no config file {path!r} and no bundled config {name!r}") from None
    return sio.read_json(path)


def _shape_inputs(X: np.ndarray, input_shape: List[int]) -> np.ndarray:
    want = int(np.prod(input_shape))
    if int(np.prod(X.shape[1:])) != want:
        raise ValidationError(f"data examples have shape {X.shape[1:]}, model expects {input_shape}")
    return X.reshape((len(X),) + tuple(input_shape))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    for key in ("model", "plan", "input_shape"):
        if key not in cfg:
            raise ValidationError(f"training config is missing {key!r}")
    plan_doc = dict(cfg["plan"])
    seed = resolve_seed(args.seed, plan_doc.get("seed", 0))
    plan_doc["seed"] = seed
    plan = TrainPhasePlan.from_dict(plan_doc)
    kd = KdConfig(**{k: v for k, v in cfg.get("kd", {}).items() if k in ("enabled", "temperature", "weight")})
    teacher = None
    if args.teacher:
        teacher, _ = sio.load_model(args.teacher)
        kd = KdConfig(True, kd.temperature, kd.weight)
    X, y = sio.load_idx_dataset(args.data)
    X = _shape_inputs(X, cfg["input_shape"])
    model = sio.build_model(cfg["model"], seed)
    l1 = float(cfg.get("l1", 0.0))
    model, log = run_training(model, (X, y), plan, kd, l1, teacher)
    data_digest = hashlib.sha256(X.tobytes() + y.tobytes()).hexdigest()
    provenance = {"seed": seed, "plan": plan.to_dict(), "plan_digest": _digest(plan.to_dict()),
                  "kd": {"enabled": kd.enabled, "temperature": kd.temperature, "kd_weight": kd.weight},
                  "l1": l1, "data_digest": data_digest, "final_accuracy": log[-2]["accuracy"] if len(log) > 1
                  else None}
    metrics_path = args.metrics or str(Path(args.out).with_suffix("")) + ".metrics.jsonl"
    # write both files only after training succeeded
    sio.atomic_write(metrics_path, metrics_jsonl(log))
    sio.save_model(args.out, model, cfg.get("arch", "sequential"), provenance, cfg["input_shape"])
    if len(log) > 1:
        print(f"final train accuracy {log[-2]['accuracy']:.4f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# export / infer
# ---------------------------------------------------------------------------


def cmd_export(args) -> int:
    doc = sio.read_json(args.input)
    if doc.get("kind") == "exported":
        # already exported: re-emit canonically
        out = sio.exported_to_dict(sio.exported_from_dict(doc), doc.get("arch", "sequential"),
                                   doc.get("provenance"), doc.get("input_shape"))
    else:
        model = sio.model_from_dict(doc)
        model.eval()
        out = sio.exported_to_dict(export_model(model), doc.get("arch", "sequential"), doc.get("provenance"),
                                   doc.get("input_shape"))
    sio.atomic_write(args.out, sio.canonical_json(out))
    return 0


def cmd_infer(args) -> int:
    doc = sio.read_json(args.input)
    em = sio.exported_from_dict(doc)
    x = sio.load_tensor(args.tensor)
    if doc.get("input_shape"):
        x = _shape_inputs(x, doc["input_shape"])
    counter = MultCounter()
    y = em.forward(x, counter)
    result = {"outputs": sio.encode_array(y), "multiplications": counter.multiplications,
              "additions": counter.additions, "dense_multiplications": counter.dense_multiplications}
    if y.ndim == 2:
        result["predictions"] = [int(v) for v in np.argmax(y, axis=1)]
    _emit(sio.canonical_json(result), args.out)
    print(f"multiplications: {counter.multiplications} (SPN) + {counter.dense_multiplications} (dense)",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strassen-spn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
        return p

    st = sub.add_parser("strassen", help="search for or verify exact ternary matrix multiplication algorithms")
    ssub = st.add_subparsers(dest="action", required=True)
    s = seeded(ssub.add_parser("search"))
    s.add_argument("--n", type=int, default=2)
    s.add_argument("--rank", type=int, default=7)
    s.add_argument("--restarts", type=int, default=100)
    s.add_argument("--pairs", type=int, default=100_000, help="training pairs per restart")
    s.add_argument("--init", choices=("uniform", "construction"), default="uniform")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for restarts")
    s.add_argument("--out", help="solution JSON (default: stdout)")
    s.add_argument("--report", help="per-restart loss report JSON")
    v = seeded(ssub.add_parser("verify"))
    v.add_argument("--in", dest="input", help="solution JSON")
    v.add_argument("--fixture", choices=FIXTURES, help="bundled solution to check")

    b = seeded(sub.add_parser("budget", help="multiplication/addition/size report"))
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--arch", help=f"bundled spec ({', '.join(bud.BUNDLED)}) or JSON file")
    src.add_argument("--model", help="model or exported-model file")
    b.add_argument("--r-ratio", type=float, default=None, help="r as a multiple of c_out")
    b.add_argument("--p", type=int, default=None, help="output patch size")
    b.add_argument("--g", type=int, default=None, help="groups in W_b")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--per-layer", action="store_true")
    b.add_argument("--no-bn", action="store_true", help="do not charge batch norm")
    b.add_argument("--out")

    d = seeded(sub.add_parser("data", help="write the synthetic blob dataset as IDX files"))
    d.add_argument("--out", required=True, help="directory")
    d.add_argument("--per-class", type=int, default=100)

    t = seeded(sub.add_parser("train", help="three-phase training on an IDX dataset"))
    t.add_argument("--config", help="training config JSON or bundled name (blobs-fp, blobs-st, blobs-st-conv)")
    t.add_argument("--data", required=True, help="directory with train-images/labels IDX files")
    t.add_argument("--teacher", help="teacher model file; enables knowledge distillation")
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--metrics", help="metrics log (default: <out>.metrics.jsonl)")

    e = seeded(sub.add_parser("export", help="fold scales and pack ternary weights"))
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", required=True)

    i = seeded(sub.add_parser("infer", help="run the add-only kernel on an exported model"))
    i.add_argument("--in", dest="input", required=True, help="exported model")
    i.add_argument("--input", dest="tensor", required=True, help=".npy, .json or IDX tensor")
    i.add_argument("--out")
    return ap


COMMANDS = {"strassen": cmd_strassen, "budget": cmd_budget, "data": cmd_data, "train": cmd_train,
            "export": cmd_export, "infer": cmd_infer}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (SpnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
