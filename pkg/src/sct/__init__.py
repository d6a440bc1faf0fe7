"""Stop-code-tolerant recurrent image codec (library + `sct` CLI)."""

__version__ = "0.1.0"
