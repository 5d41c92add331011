"""
Run script for the TSN emulation toolkit.
Same as `python -m tsnemu.cli`; see README.md for the pipeline walkthrough.
"""
import sys


def main():
    """Run the tsnemu command line"""
    from tsnemu.cli import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
