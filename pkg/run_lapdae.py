#!/usr/bin/env python3
"""
Runner for the LapDAE command line without installing the package

    python run_lapdae.py train --config configuration.ini --data-dir ./data/mnist
"""

import os
import sys

# Add current directory to path so the package and config.py import
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lapdae.cli import main

if __name__ == "__main__":
    sys.exit(main())
