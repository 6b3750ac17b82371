import sys

from transnorm.cli import main

sys.exit(main())
