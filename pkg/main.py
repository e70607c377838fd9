#!/usr/bin/env python
"""
Main entry point: ``python main.py <command> ...``
"""
from cli import app

if __name__ == "__main__":
    app(prog_name="ttt")
