"""Configuration of the profiler and the emulator.

Settings are resolved from built-in defaults, an optional YAML file, the
environment and explicit overrides (command line flags), in increasing
order of precedence. A settings file looks like:

    profile:
      sample_rate_hz: 2
      watchers: [compute, memory, storage]
      fp_fraction: 0.5
    emulate:
      block_size: 4MiB
      scratch_dir: /scratch/me
    store: ~/.pyworkload/profiles
"""

import logging
import os
import tempfile
import six
from pyworkload import model
from pyworkload import util
from pyworkload.model import ResourceKind


MAX_SAMPLE_RATE_HZ = 10.0
DEFAULT_SAMPLE_RATE_HZ = 1.0
SAMPLE_RATE_ENV = 'SYNAPSE_SAMPLE_RATE'
CONFIG_ENV = 'PYWORKLOAD_CONFIG'
STORE_ENV = 'PYWORKLOAD_STORE'

DEFAULT_STORE = os.path.join('~', '.pyworkload', 'profiles')
DEFAULT_CALIBRATION = os.path.join('~', '.pyworkload', 'calibration.json')
DEFAULT_BLOCK_BYTES = util.MiB
DEFAULT_SEED_BYTES = 16 * util.MiB
DEFAULT_QUANTUM_S = 0.01
# Memory held by the emulator's own interpreters, on top of the replayed
# allocations.
DEFAULT_MEMORY_ALLOWANCE_BYTES = 150 * 1000 ** 2


class Error(Exception):
    """Base exception class for this module."""


class ConfigError(Error, ValueError):
    """A configuration value is invalid."""


def load_settings(path=None, environ=None):
    """Load the settings file.

    Args:
        path: The YAML file to read. Defaults to $PYWORKLOAD_CONFIG.
        environ: The environment to consult (default os.environ).
    Returns:
        The settings mapping; empty if no file is configured.
    Raises:
        ConfigError: if the file cannot be read or parsed.
    """
    if environ is None:
        environ = os.environ
    path = path or environ.get(CONFIG_ENV)
    if not path:
        return {}
    log = logging.getLogger('pyworkload.config')
    log.info('loading settings from %s', path)
    try:
        return util.load_yaml(os.path.expanduser(path))
    except (IOError, OSError) as err:
        raise ConfigError('Unable to load settings %s: %s' % (path, err))
    except util.Error as err:
        raise ConfigError('Invalid settings file %s: %s' % (path, err))


def store_locator(settings=None, environ=None, override=None):
    """Return the configured store locator."""
    if override:
        return override
    if environ is None:
        environ = os.environ
    if environ.get(STORE_ENV):
        return environ[STORE_ENV]
    return (settings or {}).get('store') or DEFAULT_STORE


class ProfilerConfig(object):
    """Settings of one profiling run."""

    def __init__(self, sample_rate_hz=DEFAULT_SAMPLE_RATE_HZ, tags=None,
                 watchers_enabled=None, fp_fraction=1.0):
        """Initialize a new ProfilerConfig.

        Args:
            sample_rate_hz: Samples per second, within (0, 10].
            tags: An iterable of tags for the profile.
            watchers_enabled: Resource kinds to watch (default all).
            fp_fraction: Fraction of instructions counted as FLOPs.
        Raises:
            ConfigError: if a value is out of range.
        """
        self.sample_rate_hz = sample_rate_hz
        self.tags = tags
        self.watchers_enabled = watchers_enabled
        self.fp_fraction = fp_fraction

    def get_sample_rate_hz(self):
        return self._sample_rate_hz

    def set_sample_rate_hz(self, value):
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ConfigError('Sample rate must be a number, got %r' %
                              (value,))
        if not 0 < value <= MAX_SAMPLE_RATE_HZ:
            raise ConfigError('Sample rate must be within (0, %g] Hz, '
                              'got %g' % (MAX_SAMPLE_RATE_HZ, value))
        self._sample_rate_hz = value

    sample_rate_hz = property(get_sample_rate_hz, set_sample_rate_hz, None,
                              'Samples per second of every watcher.')

    @property
    def period_s(self):
        return 1.0 / self._sample_rate_hz

    def get_tags(self):
        return self._tags

    def set_tags(self, value):
        if isinstance(value, six.string_types):
            value = [value]
        self._tags = frozenset(value or ())

    tags = property(get_tags, set_tags, None, 'Tags of the profile key.')

    def get_watchers_enabled(self):
        return self._watchers_enabled

    def set_watchers_enabled(self, value):
        if value is None:
            value = list(ResourceKind)
        try:
            kinds = frozenset(ResourceKind.parse(kind) for kind in value)
        except model.InvalidArgument as err:
            raise ConfigError(str(err))
        if not kinds:
            raise ConfigError('At least one watcher must be enabled')
        self._watchers_enabled = kinds

    watchers_enabled = property(get_watchers_enabled, set_watchers_enabled,
                                None, 'Resource kinds to watch.')

    def get_fp_fraction(self):
        return self._fp_fraction

    def set_fp_fraction(self, value):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ConfigError('fp_fraction must be within [0, 1], got %g' %
                              value)
        self._fp_fraction = value

    fp_fraction = property(get_fp_fraction, set_fp_fraction, None,
                           'Fraction of instructions counted as FLOPs.')

    @classmethod
    def from_settings(cls, settings=None, environ=None, **overrides):
        """Resolve a config from settings, environment and overrides.

        Args:
            settings: A mapping as returned by load_settings.
            environ: The environment to consult (default os.environ).
            overrides: Explicit values; None values are ignored.
        Returns:
            A ProfilerConfig.
        Raises:
            ConfigError: if any resolved value is invalid.
        """
        if environ is None:
            environ = os.environ
        section = dict((settings or {}).get('profile') or {})
        values = {}
        if 'sample_rate_hz' in section:
            values['sample_rate_hz'] = section['sample_rate_hz']
        if 'watchers' in section:
            values['watchers_enabled'] = section['watchers']
        if 'tags' in section:
            values['tags'] = section['tags']
        if 'fp_fraction' in section:
            values['fp_fraction'] = section['fp_fraction']
        if environ.get(SAMPLE_RATE_ENV):
            values['sample_rate_hz'] = environ[SAMPLE_RATE_ENV]
        for name, value in six.iteritems(overrides):
            if value is not None:
                values[name] = value
        return cls(**values)

    def __repr__(self):
        return ('ProfilerConfig(sample_rate_hz=%g, tags=%s, watchers=%s)' %
                (self.sample_rate_hz, sorted(self.tags),
                 sorted(kind.value for kind in self.watchers_enabled)))


class EmulatorConfig(object):
    """Tuning of the emulation atoms."""

    def __init__(self, block_bytes=DEFAULT_BLOCK_BYTES, scratch_dir=None,
                 seed_bytes=DEFAULT_SEED_BYTES, quantum_s=DEFAULT_QUANTUM_S,
                 efficiency=None, fp_fraction=1.0,
                 memory_allowance_bytes=DEFAULT_MEMORY_ALLOWANCE_BYTES,
                 use_perf=True, calibration_path=DEFAULT_CALIBRATION):
        """Initialize a new EmulatorConfig.

        Args:
            block_bytes: Block size of memory and storage operations.
            scratch_dir: Directory for storage atom files (default the
                system temp directory).
            seed_bytes: Size of the pre-seeded file storage reads use.
            quantum_s: Duration of one duty-cycle batch of compute.
            efficiency: Efficiency target overriding the profile.
            fp_fraction: Fraction of instructions counted as FLOPs.
            memory_allowance_bytes: Expected memory overhead of emulation.
            use_perf: Whether to calibrate with hardware counters.
            calibration_path: File caching the compute kernel calibration.
        Raises:
            ConfigError: if a value is out of range.
        """
        try:
            self.block_bytes = util.parse_size(block_bytes)
            self.seed_bytes = util.parse_size(seed_bytes)
            self.memory_allowance_bytes = util.parse_size(
                memory_allowance_bytes)
        except util.Error as err:
            raise ConfigError(str(err))
        if self.block_bytes <= 0:
            raise ConfigError('Block size must be > 0')
        if self.seed_bytes < self.block_bytes:
            self.seed_bytes = self.block_bytes
        self.scratch_dir = os.path.expanduser(
            scratch_dir or tempfile.gettempdir())
        self.quantum_s = float(quantum_s)
        if self.quantum_s <= 0:
            raise ConfigError('Duty-cycle quantum must be > 0')
        if efficiency is not None:
            efficiency = float(efficiency)
            if not 0.0 < efficiency <= 1.0:
                raise ConfigError('Efficiency must be within (0, 1], got %g'
                                  % efficiency)
        self.efficiency = efficiency
        self.fp_fraction = float(fp_fraction)
        self.use_perf = use_perf
        self.calibration_path = os.path.expanduser(calibration_path)

    @classmethod
    def from_settings(cls, settings=None, **overrides):
        """Resolve an emulator config from settings and overrides."""
        section = dict((settings or {}).get('emulate') or {})
        values = {}
        for key, name in (('block_size', 'block_bytes'),
                          ('scratch_dir', 'scratch_dir'),
                          ('seed_size', 'seed_bytes'),
                          ('quantum', 'quantum_s'),
                          ('efficiency', 'efficiency'),
                          ('memory_allowance', 'memory_allowance_bytes'),
                          ('use_perf', 'use_perf'),
                          ('calibration', 'calibration_path')):
            if key in section:
                values[name] = section[key]
        fp_fraction = ((settings or {}).get('profile') or {}).get(
            'fp_fraction')
        if fp_fraction is not None:
            values['fp_fraction'] = fp_fraction
        for name, value in six.iteritems(overrides):
            if value is not None:
                values[name] = value
        return cls(**values)
