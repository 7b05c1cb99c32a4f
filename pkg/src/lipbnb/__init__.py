"""Lipschitz-bound branch and bound for network reachability."""
