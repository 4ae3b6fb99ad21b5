import os
import sys
import tempfile

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import robustpl_cli


def main():
    # Runs a single-seed simulation into a temp dir and prints where the
    # grid disagrees between the CE and robust boundaries.
    with tempfile.TemporaryDirectory() as tmp:
        code = robustpl_cli.main([
            'simulate', '--config', os.path.join(ROOT, 'configs', 'fig2_simulate.json'),
            '--repeats', '1', '--out', tmp, '--log', 'WARN',
        ])
        if code != 0:
            return code
        disagree = 0
        total = 0
        with open(os.path.join(tmp, 'grid.csv'), 'r', encoding='utf-8') as f:
            next(f)
            for line in f:
                _x, _y, a, b = line.strip().split(',')
                total += 1
                disagree += a != b
        print(f'{disagree}/{total} lattice points change class between CE and robust')
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
