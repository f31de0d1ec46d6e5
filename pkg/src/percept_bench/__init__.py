"""percept-bench: object perception toolkit and detection benchmark harness."""

__version__ = "0.1.0"
