"""Isolated verifier entry point.

Reads one serialized VerificationRequest from stdin and writes the
report as JSON to stdout. The process sees nothing but the request
bytes, so verification cannot depend on ambient run state.
"""

from __future__ import annotations

import json
import sys

from .verifier import VerificationRequest, verify_block


def main() -> int:
    data = sys.stdin.buffer.read()
    req = VerificationRequest.from_bytes(data)
    report = verify_block(req)
    json.dump(report.to_json(), sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
