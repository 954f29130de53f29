"""
DOCO - Entry Point
Run this file with a subcommand: pretrain, run, sweep or verify.
"""

import sys
import os

# Add project root to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
