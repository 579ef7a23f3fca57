"""Equilibrium prices of an informed-trading game and their continuous-time limit."""
