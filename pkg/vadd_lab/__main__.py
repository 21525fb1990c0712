import sys

from vadd_lab.main import main

sys.exit(main())
