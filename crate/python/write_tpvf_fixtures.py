"""Writes the TPVF contract fixtures with nothing but `struct`.

This is the reference the Python exporter has to match: the engine's
`exporter_contract` test reads these files and compares them against its
own encoder. Rerun after changing the layout:

    python3 python/write_tpvf_fixtures.py crates/core/tests/fixtures
"""

import struct
import sys
from pathlib import Path

D, R = 8, 4


def tpvf(kind, d, r, fingerprint, task_id, columns):
    """`columns` holds r token vectors of length d."""
    tid = task_id.encode("utf-8")
    head = b"TPV1" + struct.pack("<IBIIQH", 1, kind, d, r, fingerprint, len(tid)) + tid
    payload = b"".join(struct.pack(f"<{d}f", *col) for col in columns)
    return head + payload


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # element (i, j) of the d x r prompt is i - 0.5 * j, exact in f32
    prompt = [[i - 0.5 * j for i in range(D)] for j in range(R)]
    (out / "prompt_8x4.tpvf").write_bytes(tpvf(0, D, R, 0, "checkpoint/prompt", prompt))
    zeros = [[0.0] * D for _ in range(R)]
    (out / "self_export_8x4.tpvf").write_bytes(tpvf(1, D, R, 0x0123456789ABCDEF, "p_init", zeros))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
