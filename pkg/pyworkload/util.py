"""Utilities for pyworkload."""

import datetime
import hashlib
import json
import re
import shlex
import six
import yaml
from dateutil import tz
from dateutil.parser import parse as date_parse


# Binary and decimal size suffixes accepted on the command line and in
# configuration files.
SIZE_UNITS = {
    '': 1,
    'b': 1,
    'k': 1000, 'kb': 1000, 'kib': 1024,
    'm': 1000 ** 2, 'mb': 1000 ** 2, 'mib': 1024 ** 2,
    'g': 1000 ** 3, 'gb': 1000 ** 3, 'gib': 1024 ** 3,
    't': 1000 ** 4, 'tb': 1000 ** 4, 'tib': 1024 ** 4,
}

SIZE_PATTERN = re.compile(r'^\s*([0-9]+(?:\.[0-9]*)?)\s*([a-zA-Z]*)\s*$')

MiB = 1024 ** 2


class Error(Exception):
    """Base exception class for this module."""


def to_json(obj, root=None, pretty=False):
    """Convert a dictionary or list to a JSON string.

    Args:
        obj: The object to serialize.
        root: Optional name of an enclosing root object.
        pretty: Whether to indent the output and sort keys.
    Returns:
        A json string.
    """
    if root:
        obj = {root: obj}
    if pretty:
        return json.dumps(obj, indent=2, sort_keys=True)
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def json_to_dict(jsonstr):
    """Parse the json into a dictionary of attributes.

    Args:
        jsonstr: A JSON formatted string.
    Returns:
        The deserialized object.
    """
    return json.loads(jsonstr)


def utcnow():
    """Return the current time as a timezone aware UTC datetime."""
    return datetime.datetime.now(tz.tzutc())


def to_iso8601(timestamp):
    """Format a datetime as an ISO-8601 UTC string.

    Naive datetimes are taken to already be in UTC.
    """
    if timestamp.tzinfo is None:
        timestamp = timestamp.replace(tzinfo=tz.tzutc())
    timestamp = timestamp.astimezone(tz.tzutc())
    return timestamp.strftime('%Y-%m-%dT%H:%M:%S.%fZ')


def from_iso8601(text):
    """Parse an ISO-8601 string into a timezone aware UTC datetime.

    Raises:
        Error: if the string is not a timestamp.
    """
    try:
        timestamp = date_parse(text)
    except (ValueError, OverflowError) as err:
        raise Error('Unable to parse timestamp %r: %s' % (text, err))
    if timestamp.tzinfo is None:
        timestamp = timestamp.replace(tzinfo=tz.tzutc())
    return timestamp.astimezone(tz.tzutc())


def parse_size(value):
    """Convert a human readable size (e.g. '256MiB', '4k') to bytes.

    Args:
        value: An integer, or a string with an optional unit suffix.
    Returns:
        The size in bytes as an integer.
    Raises:
        Error: if the value cannot be parsed.
    """
    if isinstance(value, six.integer_types):
        if value < 0:
            raise Error('Negative size: %d' % value)
        return value
    if isinstance(value, float):
        return parse_size(int(round(value)))
    match = SIZE_PATTERN.match(value)
    if not match:
        raise Error('Unable to parse size %r' % value)
    number, unit = match.groups()
    unit = unit.lower()
    if unit not in SIZE_UNITS:
        raise Error('Unknown size unit %r in %r' % (unit, value))
    return int(round(float(number) * SIZE_UNITS[unit]))


def format_size(num_bytes):
    """Render a byte count with a binary unit suffix."""
    for unit, scale in (('GiB', 1024 ** 3), ('MiB', MiB), ('KiB', 1024)):
        if abs(num_bytes) >= scale:
            return '%.1f%s' % (float(num_bytes) / scale, unit)
    return '%dB' % num_bytes


def command_line(command):
    """Return the canonical command string for a command.

    Args:
        command: A shell command string or a list of arguments.
    Returns:
        The command as a single string. Strings are returned verbatim.
    """
    if isinstance(command, six.string_types):
        return command
    return ' '.join(shlex.quote(str(arg)) for arg in command)


def command_args(command):
    """Split a command into an argument list suitable for exec."""
    if isinstance(command, six.string_types):
        return shlex.split(command)
    return [str(arg) for arg in command]


def content_hash(*parts):
    """Return a short hex digest identifying the given text parts."""
    digest = hashlib.sha1()
    for part in parts:
        digest.update(six.text_type(part).encode('utf-8'))
        digest.update(b'\0')
    return digest.hexdigest()[:16]


def load_yaml(path):
    """Load a YAML mapping from a file.

    Args:
        path: The file to read.
    Returns:
        The parsed mapping (empty for an empty file).
    Raises:
        Error: if the document is not valid YAML or not a mapping.
    """
    with open(path) as stream:
        try:
            data = yaml.safe_load(stream)
        except yaml.YAMLError as err:
            raise Error('Invalid YAML in %s: %s' % (path, err))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise Error('Expected a mapping in %s, got %s' %
                    (path, type(data).__name__))
    return data
