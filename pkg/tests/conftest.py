import sys
from pathlib import Path

from hypothesis import settings

# Oracle helpers live next to the tests, outside the installed package.
sys.path.insert(0, str(Path(__file__).parent))

# Property tests explore the same examples on every run, matching the
# repo-wide bit-reproducibility contract.
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")
