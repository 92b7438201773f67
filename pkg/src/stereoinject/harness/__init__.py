"""Simulator, experiments, reports and the command-line front end."""
