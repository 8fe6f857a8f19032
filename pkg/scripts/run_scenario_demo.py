#!/usr/bin/env python3
"""Run the demo contact-tracing scenario over real localhost sockets."""
import os
import sys

from psiwca.cli import main

if __name__ == "__main__":
    scenario = os.path.join(os.path.dirname(__file__), "demo_scenario.txt")
    sys.exit(main(["scenario", "--file", scenario, "--transport", "socket"] + sys.argv[1:]))
