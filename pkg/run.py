#!/usr/bin/env python3
"""
Launcher for Kernel Warehouse.
Runs the command-line interface from a source checkout.
"""
import sys
from pathlib import Path

# Ensure the project root is in the Python path
project_root = Path(__file__).resolve().parent
sys.path.append(str(project_root))

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
