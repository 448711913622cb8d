import sys

from parammarket.main import main

sys.exit(main())
