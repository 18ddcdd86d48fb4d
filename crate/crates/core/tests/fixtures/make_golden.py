"""Writes one_by_four.emb: a 1x4 EMB1 matrix [1, 2, 3, 4] with id "item-0"."""
import struct
from pathlib import Path

payload = b"EMB1" + struct.pack("<II", 1, 4) + struct.pack("<4f", 1.0, 2.0, 3.0, 4.0) + b"item-0"
Path(__file__).with_name("one_by_four.emb").write_bytes(payload)
