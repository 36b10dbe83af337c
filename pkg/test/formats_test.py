"""Tests for the profile serialization format."""

import json
import unittest
from pyworkload import formats
from pyworkload import model
from pyworkload.model import ResourceKind
from pyworkload.testing import synthetic


def sample_profile(**kwargs):
    trajectory = synthetic.ScriptedTrajectory.linear(
        2.0, instructions=123456789, cycles_used=98765432,
        cpu_time_us=1500000, threads=4, bytes_read=4096,
        bytes_written=8192, peak_bytes=1 << 30, resident_bytes=1 << 29,
        allocated_bytes=1 << 30)
    return synthetic.scripted_profile(trajectory, 2.0, command='app --n 3',
                                      tags=['b', 'a'], **kwargs)


class ProfileFormatTest(unittest.TestCase):

    def test_round_trip(self):
        profile = sample_profile()
        self.assertEqual(profile, formats.ProfileFormat.decode(
            formats.ProfileFormat.encode(profile)))

    def test_decode_accepts_text(self):
        blob = formats.ProfileFormat.encode(sample_profile())
        self.assertIsInstance(blob, bytes)
        self.assertEqual(sample_profile().command,
                         formats.ProfileFormat.decode(
                             blob.decode('utf-8')).command)

    def test_document_layout(self):
        data = json.loads(formats.ProfileFormat.encode(
            sample_profile()).decode('utf-8'))
        self.assertEqual(formats.VERSION, data['version'])
        self.assertEqual(['a', 'b'], data['tags'])
        self.assertEqual(set(['compute', 'memory', 'storage']),
                         set(data['series']))
        first = data['series']['storage'][0]
        self.assertEqual(0, first['index'])
        self.assertNotIn('gap', first)
        self.assertIsInstance(data['totals']['instructions'], int)
        self.assertTrue(data['created_at'].endswith('Z'))

    def test_gap_marker(self):
        sample = model.Sample(2, 3.0, ResourceKind.MEMORY, gap=True)
        record = formats.sample_to_dict(sample)
        self.assertTrue(record['gap'])
        self.assertEqual(sample,
                         formats.sample_from_dict(ResourceKind.MEMORY,
                                                  record))

    def test_version_mismatch(self):
        data = formats.profile_to_dict(sample_profile())
        data['version'] = 99
        self.assertRaises(formats.Error, formats.profile_from_dict, data)

    def test_missing_field(self):
        data = formats.profile_to_dict(sample_profile())
        del data['totals']
        self.assertRaises(formats.Error, formats.profile_from_dict, data)

    def test_malformed_values(self):
        data = formats.profile_to_dict(sample_profile())
        data['series']['storage'][0]['bytes_read'] = -1
        self.assertRaises(formats.Error, formats.profile_from_dict, data)
        data = formats.profile_to_dict(sample_profile())
        data['created_at'] = 'yesterday-ish'
        self.assertRaises(formats.Error, formats.profile_from_dict, data)

    def test_not_json(self):
        self.assertRaises(formats.Error, formats.ProfileFormat.decode,
                          b'{"version": 1,')
        self.assertRaises(formats.Error, formats.ProfileFormat.decode,
                          b'\xff\xfe')
        self.assertRaises(formats.Error, formats.ProfileFormat.decode,
                          b'[]')


class ReportFormatTest(unittest.TestCase):

    def test_version_is_checked(self):
        self.assertEqual({'version': 1, 'ttc_s': 2.0},
                         formats.ReportFormat.decode(
                             b'{"version": 1, "ttc_s": 2.0}'))
        self.assertRaises(formats.Error, formats.ReportFormat.decode,
                          b'{"ttc_s": 2.0}')

    def test_report_must_be_an_object(self):
        for blob in (b'[1, 2]', b'1', b'"report"', b'null'):
            self.assertRaises(formats.Error, formats.ReportFormat.decode,
                              blob)


if __name__ == '__main__':
    unittest.main()
