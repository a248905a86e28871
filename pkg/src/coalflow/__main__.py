from __future__ import annotations

from coalflow.cli import main

main()
