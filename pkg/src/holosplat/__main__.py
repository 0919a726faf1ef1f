import sys

from holosplat.cli import main

sys.exit(main())
