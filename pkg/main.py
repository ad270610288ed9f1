"""
torusfill entry point

Run with: python main.py run config.json
Or: python -m torusfill.main validate
"""

import sys

from torusfill.main import main

if __name__ == "__main__":
    sys.exit(main())
