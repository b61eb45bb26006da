"""Regenerate configs/reference.yaml from the built-in defaults."""

import sys
from pathlib import Path

from amdtomo.pipeline import write_reference_config

out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
    Path(__file__).resolve().parent.parent / "configs" / "reference.yaml"
)
out.parent.mkdir(parents=True, exist_ok=True)
write_reference_config(out)
print(out)
