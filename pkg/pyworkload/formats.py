"""Profile and emulation report formats.

Profiles are serialized as versioned JSON documents:

    {"version": 1, "command": "...", "tags": [...], "system": {...},
     "sample_rate_hz": 1.0, "spawn_offset_s": 0.01, "exit_status": 0,
     "flags": [...], "system_load": 0.3, "ttc_s": 2.0,
     "series": {"compute": [{"index": 0, "t": 1.0, "instructions": ...}]},
     "totals": {"runtime_s": 2.0, "instructions": ...},
     "created_at": "2024-01-01T00:00:00.000000Z"}

All counters are integers. A sample which could not be read carries
"gap": true, zero deltas and the levels of the sample before it.
"""

import logging
import six
from pyworkload import model
from pyworkload import util
from pyworkload.model import ResourceKind


VERSION = 1


class Error(Exception):
    """Base exception type for this module."""


def _decode_text(data):
    if isinstance(data, six.binary_type):
        return data.decode('utf-8')
    return data


def sample_to_dict(sample):
    """Convert a Sample to its JSON object."""
    record = {'index': sample.index, 't': sample.timestamp_s}
    if sample.gap:
        record['gap'] = True
    record.update(sample.payload._asdict())
    return record


def sample_from_dict(kind, record):
    """Convert a JSON object back to a Sample of the given kind."""
    payload_type = model.PAYLOAD_TYPES[kind]
    payload = payload_type(**dict((name, record.get(name, 0))
                                  for name in payload_type._fields))
    return model.Sample(record['index'], record['t'], kind, payload,
                        gap=record.get('gap', False))


def profile_to_dict(profile):
    """Convert a Profile to the JSON document structure."""
    system = profile.system
    return {
        'version': VERSION,
        'command': profile.command,
        'tags': sorted(profile.tags),
        'system': {
            'core_count': system.core_count,
            'max_freq_hz': system.max_freq_hz,
            'total_memory_bytes': system.total_memory_bytes,
            'os_descriptor': system.os_descriptor,
            'cpu_model': system.cpu_model,
        },
        'sample_rate_hz': profile.sample_rate_hz,
        'spawn_offset_s': profile.spawn_offset_s,
        'exit_status': profile.exit_status,
        'flags': list(profile.flags),
        'system_load': profile.system_load,
        'ttc_s': profile.ttc_s,
        'series': dict((kind.value, [sample_to_dict(s) for s in samples])
                       for kind, samples in six.iteritems(profile.series)),
        'totals': profile.totals._asdict(),
        'created_at': util.to_iso8601(profile.created_at),
    }


def profile_from_dict(data):
    """Build a Profile from a decoded JSON document.

    Raises:
        Error: if the document has the wrong version or is malformed.
    """
    if not isinstance(data, dict):
        raise Error('Expected a profile object, got %s' %
                    type(data).__name__)
    version = data.get('version')
    if version != VERSION:
        raise Error('Unsupported profile version %r' % (version,))
    try:
        series = {}
        for name, records in six.iteritems(data['series']):
            kind = ResourceKind.parse(name)
            series[kind] = [sample_from_dict(kind, r) for r in records]
        totals = dict(data['totals'])
        runtime_s = totals.pop('runtime_s')
        return model.Profile(
            command=data['command'],
            tags=data['tags'],
            system=model.SystemInfo(**data['system']),
            series=series,
            totals=model.Totals(runtime_s, **totals),
            sample_rate_hz=data['sample_rate_hz'],
            spawn_offset_s=data['spawn_offset_s'],
            created_at=util.from_iso8601(data['created_at']),
            exit_status=data.get('exit_status', 0),
            flags=data.get('flags', ()),
            system_load=data.get('system_load'),
            ttc_s=data.get('ttc_s'))
    except KeyError as err:
        raise Error('Profile document lacks the %s field' % err)
    except (model.Error, util.Error, TypeError, ValueError) as err:
        raise Error('Malformed profile document: %s' % err)


class Base(object):
    """A base format object for inheritance."""

    extension = 'json'


class ProfileFormat(Base):
    """Encode and decode JSON formatted profiles."""

    @staticmethod
    def decode(profile_string):
        """Convert a serialized profile to a Profile."""
        log = logging.getLogger('pyworkload.formats')
        log.debug('decoding profile of %d bytes', len(profile_string))
        try:
            data = util.json_to_dict(_decode_text(profile_string))
        except (ValueError, UnicodeDecodeError) as err:
            raise Error(err)
        return profile_from_dict(data)

    @staticmethod
    def encode(profile):
        """Convert a Profile to a serialized profile."""
        log = logging.getLogger('pyworkload.formats')
        log.debug('encoding %r', profile)
        return util.to_json(profile_to_dict(profile)).encode('utf-8')


class ReportFormat(Base):
    """Encode and decode JSON formatted emulation reports."""

    @staticmethod
    def decode(report_string):
        """Convert a serialized report to a dictionary."""
        try:
            data = util.json_to_dict(_decode_text(report_string))
        except (ValueError, UnicodeDecodeError) as err:
            raise Error(err)
        if not isinstance(data, dict):
            raise Error('Expected a report object, got %s' %
                        type(data).__name__)
        if data.get('version') != VERSION:
            raise Error('Unsupported report version %r' %
                        (data.get('version'),))
        return data

    @staticmethod
    def encode(report):
        """Convert an EmulationReport to a serialized report."""
        log = logging.getLogger('pyworkload.formats')
        log.debug('encoding emulation report of %d groups',
                  len(report.groups))
        data = report.to_dict()
        data['version'] = VERSION
        return util.to_json(data, pretty=True).encode('utf-8')
