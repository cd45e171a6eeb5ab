"""Configuration, probes, orchestration, outputs and the command line."""
