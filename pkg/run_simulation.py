#!/usr/bin/env python3
import sys
import bvmlab

if __name__ == "__main__":
    sys.exit(bvmlab.main())
