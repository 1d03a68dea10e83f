#!/usr/bin/env python3
"""Main entry point for the cross-task attack toolkit"""
import sys

from src.cli import main

if __name__ == '__main__':
    sys.exit(main())
