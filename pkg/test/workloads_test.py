"""Tests for the reference workloads."""

import os
import shutil
import sys
import tempfile
import unittest
from pyworkload import workloads


class WorkloadsTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_command(self):
        self.assertEqual(
            [sys.executable, '-m', 'pyworkload.workloads', 'write',
             '--iterations', '10', '--scratch', self.dir],
            workloads.command('write', 10, self.dir))
        self.assertRaises(workloads.Error, workloads.command, 'sleep', 1)

    def test_compute(self):
        self.assertEqual(workloads.compute(3), workloads.compute(3))

    def test_write_cleans_up(self):
        workloads.write(10, self.dir)
        self.assertEqual([], os.listdir(self.dir))

    def test_mixed(self):
        workloads.mixed(2 * workloads.PHASE_ITERATIONS + 10, self.dir)
        self.assertEqual([], os.listdir(self.dir))

    def test_main(self):
        self.assertEqual(0, workloads.main(['compute', '--iterations', '5']))
        self.assertEqual(0, workloads.main(['write', '--iterations', '5',
                                            '--scratch', self.dir]))


if __name__ == '__main__':
    unittest.main()
