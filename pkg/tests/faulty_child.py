"""Misbehaving predictor process for protocol error tests.

Usage: ``python faulty_child.py MODE`` with MODE one of truncate, silent,
garbage, exit, wrong_shape, slow_second.
"""

import sys
import time

import numpy as np

from volseg.predictors import encode_frame, read_frame


def main(mode: str) -> int:
    out = sys.stdout.buffer
    count = 0
    while True:
        arr = read_frame(sys.stdin.buffer)
        if arr is None:
            return 0
        count += 1
        if mode == "truncate":
            frame = encode_frame(arr)
            out.write(frame[: len(frame) - 3])
            out.flush()
            return 0
        if mode == "silent" or (mode == "slow_second" and count == 2):
            time.sleep(60)
            return 0
        if mode == "garbage":
            out.write(b"not a header\n")
            out.flush()
            continue
        if mode == "exit":
            return 3
        if mode == "wrong_shape":
            out.write(encode_frame(np.zeros((2,) + arr.shape[1:], np.float32)))
            out.flush()
            continue
        out.write(encode_frame(arr))
        out.flush()


if __name__ == "__main__":
    sys.exit(main(sys.argv[1]))
