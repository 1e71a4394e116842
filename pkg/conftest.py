"""Lets the test suite import the top-level modules without installation"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
