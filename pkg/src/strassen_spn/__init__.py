"""Learned fast approximate matrix multiplication with ternary sum-product networks."""
