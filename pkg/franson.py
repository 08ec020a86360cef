"""Energy-time entanglement desk CLI.

Simulates two-party time-tag streams for a scenario, synchronizes the clocks,
discretizes the streams at several dimensions and reports witness values and
key rates per block.
"""
from __future__ import annotations

from timebin.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
