"""Conformity-constrained risky-sample generation with gradient-guided DDIM."""
