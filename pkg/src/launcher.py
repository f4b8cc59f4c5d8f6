# launcher.py

import sys

from mspformer.main import main

if __name__ == '__main__':
    sys.exit(main())
