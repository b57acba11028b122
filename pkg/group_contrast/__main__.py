# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import sys

from group_contrast.cli import main

if __name__ == '__main__':
    sys.exit(main())
