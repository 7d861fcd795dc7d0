"""Regenerate the scaffold regression snapshot used by tests/test_fedcore.py.

Only rerun this after a deliberate change to the training arithmetic, and
review the diff of the JSON file before committing it.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from test_fedcore import GOLDEN, SIZES, _trajectory  # noqa: E402

from feddwa import fedcore, nn  # noqa: E402


def main():
    history = _trajectory(nn.init_model(SIZES, seed=1), fedcore.run_scaffold_round, rounds=3)
    payload = {"rounds": [{"params": p.tolist(), "c_global": c.tolist()} for p, c in history]}
    GOLDEN.write_text(json.dumps(payload, indent=1) + "\n")
    print(f"wrote {GOLDEN}")


if __name__ == "__main__":
    main()
