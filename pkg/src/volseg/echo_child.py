"""Echo predictor process: replies to every frame with the frame itself.

Run as ``python -m volseg.echo_child``.
"""

import sys

from .predictors import serve


def main() -> int:
    serve(lambda arr: arr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
