"""Allow running as: python -m zdmix"""

from zdmix.cli import main

main()
