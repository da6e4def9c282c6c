import sys

from pedmr_sim.main import main

if __name__ == "__main__":
    sys.exit(main())
