"""The pyworkload command line.

    pyworkload profile  [--tag T]... [--rate HZ] -- COMMAND...
    pyworkload emulate  [--tag T]... [--block-size SIZE] -- COMMAND...
    pyworkload report   {overhead,consistency,fidelity,profile} -- COMMAND...
    pyworkload stress   [--cpu CORES] [--disk MBPS] [--mem SIZE]

Exit codes: 0 success, 1 other errors, 2 usage or spawn errors, 3 the
profiled command failed (its profile is saved and flagged), 4 no profile
for the key, 5 an emulation atom or a background load failed.
"""

import argparse
import functools
import logging
import os
import sys
from pyworkload import config as config_
from pyworkload import emulator
from pyworkload import formats
from pyworkload import model
from pyworkload import report
from pyworkload import sampler
from pyworkload import store as store_
from pyworkload import telemetry
from pyworkload import util


EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_TARGET_FAILED = 3
EXIT_NO_PROFILE = 4
EXIT_ATOM_FAILED = 5


class Error(Exception):
    """Base exception class for this module."""


class UsageError(Error):
    """The invocation is invalid."""


def _size(value):
    try:
        return util.parse_size(value)
    except util.Error as err:
        raise argparse.ArgumentTypeError(str(err))


def _kinds(value):
    try:
        return [model.ResourceKind.parse(kind) for kind in value.split(',')
                if kind.strip()]
    except model.InvalidArgument as err:
        raise argparse.ArgumentTypeError(str(err))


def _timestamp(value):
    try:
        return util.from_iso8601(value)
    except util.Error as err:
        raise argparse.ArgumentTypeError(str(err))


def build_parser():
    """Return the argument parser of the command line."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--tag', action='append', default=[],
                        help='tag of the profile key (repeatable)')
    common.add_argument('--rate', type=float, default=None,
                        help='samples per second, at most %g '
                             '(default $%s or %g)' % (
                                 config_.MAX_SAMPLE_RATE_HZ,
                                 config_.SAMPLE_RATE_ENV,
                                 config_.DEFAULT_SAMPLE_RATE_HZ))
    common.add_argument('--store', default=None,
                        help='profile directory or mongodb:// locator')
    common.add_argument('--scratch', default=None,
                        help='directory of scratch files')
    common.add_argument('--block-size', type=_size, default=None,
                        help='block size of memory and storage atoms')
    common.add_argument('--config', default=None,
                        help='YAML settings file (default $%s)' %
                             config_.CONFIG_ENV)
    common.add_argument('--no-perf', action='store_true',
                        help='estimate CPU counters instead of using perf')
    common.add_argument('-v', '--verbose', action='store_true')

    parser = argparse.ArgumentParser(
        prog='pyworkload',
        description='Profile a command once, emulate it anywhere.')
    commands = parser.add_subparsers(dest='subcommand', metavar='COMMAND')
    commands.required = True

    profile = commands.add_parser('profile', parents=[common],
                                  help='profile a command')
    profile.add_argument('--watchers', type=_kinds, default=None,
                         help='comma separated resource kinds to watch')
    profile.add_argument('--fp-fraction', type=float, default=None,
                         help='fraction of instructions counted as FLOPs')

    emulate = commands.add_parser('emulate', parents=[common],
                                  help='emulate a profiled command')
    emulate.add_argument('--created-at', type=_timestamp, default=None,
                         help='emulate the profile created at this time '
                              '(default the most recent)')
    emulate.add_argument('--efficiency', type=float, default=None,
                         help='compute efficiency overriding the profile')
    emulate.add_argument('--load-cpu', type=float, default=0.0,
                         help='cores of background CPU load')
    emulate.add_argument('--load-disk', type=float, default=0.0,
                         help='MB/s of background disk writes')
    emulate.add_argument('--load-mem', type=_size, default=0,
                         help='background memory held')
    emulate.add_argument('--record', action='store_true',
                         help='store the emulation run for fidelity reports')
    emulate.add_argument('--report', default=None,
                         help='write the JSON emulation report to a file')

    reports = commands.add_parser('report', parents=[common],
                                  help='write CSV reports')
    reports.add_argument('kind', choices=('overhead', 'consistency',
                                          'fidelity', 'profile'))
    reports.add_argument('--command', dest='commands', action='append',
                         default=[], help='command of a configuration '
                                          '(repeatable)')
    reports.add_argument('--variant', action='append', default=[],
                         help='comma separated tags added to the common '
                              'tags, one configuration each (repeatable)')
    reports.add_argument('--plain-tag', action='append', default=[],
                         help='tag of the unprofiled runs')
    reports.add_argument('--profiled-tag', action='append', default=[],
                         help='tag of the profiled runs')
    reports.add_argument('--created-at', type=_timestamp, default=None)
    reports.add_argument('--output', default=None,
                         help='CSV file (default stdout)')
    reports.add_argument('--svg', default=None, help='also plot to SVG')

    stress = commands.add_parser('stress', parents=[common],
                                 help='hold a background load')
    stress.add_argument('--cpu', type=float, default=0.0,
                        help='cores to keep busy')
    stress.add_argument('--disk', type=float, default=0.0,
                        help='MB/s to write')
    stress.add_argument('--mem', type=_size, default=0,
                        help='memory to hold')
    stress.add_argument('--duration', type=float, default=None,
                        help='seconds to hold the load (default until '
                             'interrupted)')
    return parser


def target_command(args):
    """Return the target command of an invocation.

    A single argument is a shell style command line, several arguments
    are an argument list.
    """
    command = list(args.command or ())
    if not command:
        raise UsageError('No target command given after --')
    if len(command) == 1:
        return command[0]
    return command


class Cli(object):
    """Dispatches one command line invocation."""

    def __init__(self, args, backend=None, environ=None, stdout=None,
                 stderr=None):
        self.log = logging.getLogger('pyworkload.cli')
        self.args = args
        self.environ = os.environ if environ is None else environ
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.settings = config_.load_settings(args.config, self.environ)
        self._backend = backend

    @property
    def backend(self):
        if self._backend is None:
            self._backend = telemetry.default_backend(
                use_perf=not self.args.no_perf)
        return self._backend

    def store(self):
        return store_.open_store(config_.store_locator(
            self.settings, self.environ, self.args.store))

    def say(self, msg, *args):
        self.stdout.write((msg % args if args else msg) + '\n')

    def complain(self, msg, *args):
        self.stderr.write('pyworkload: ' + (msg % args if args else msg) +
                          '\n')

    def key(self, command=None, extra_tags=()):
        if command is None:
            command = target_command(self.args)
        tags = list(self.args.tag) or list(
            (self.settings.get('profile') or {}).get('tags') or ())
        return store_.ProfileKey(command, tags + list(extra_tags))

    def cmd_profile(self):
        config = config_.ProfilerConfig.from_settings(
            self.settings, self.environ, sample_rate_hz=self.args.rate,
            tags=self.args.tag or None,
            watchers_enabled=self.args.watchers,
            fp_fraction=self.args.fp_fraction)
        command = target_command(self.args)
        try:
            stored_id, profile = sampler.Profiler(
                self.backend, config).profile_to(self.store(), command)
        except sampler.CommandError as err:
            self.complain('%s', err)
            return EXIT_USAGE
        totals = profile.totals
        self.say('%s runtime=%.3fs instructions=%d peak=%s read=%s '
                 'written=%s samples=%d%s', stored_id, profile.runtime_s,
                 totals.instructions, util.format_size(totals.peak_bytes),
                 util.format_size(totals.bytes_read),
                 util.format_size(totals.bytes_written),
                 profile.sample_count(),
                 ' flags=%s' % ','.join(profile.flags)
                 if profile.flags else '')
        if profile.failed:
            self.complain('%r exited with status %d', profile.command,
                          profile.exit_status)
            return EXIT_TARGET_FAILED
        return EXIT_OK

    def cmd_emulate(self):
        config = config_.EmulatorConfig.from_settings(
            self.settings, block_bytes=self.args.block_size,
            scratch_dir=self.args.scratch, efficiency=self.args.efficiency,
            use_perf=False if self.args.no_perf else None)
        key = self.key()
        load = None
        if self.args.load_cpu or self.args.load_disk or self.args.load_mem:
            load = functools.partial(
                emulator.background_load, self.args.load_cpu,
                self.args.load_disk, self.args.load_mem, config.scratch_dir,
                config.block_bytes)
        try:
            report_ = emulator.emulate_command(
                key.command, key.tags, self.store(), self.args.created_at,
                config, backend=self.backend, load=load,
                record=self.args.record)
        except store_.ProfileNotFound as err:
            self.complain('%s', err)
            return EXIT_NO_PROFILE
        except emulator.LoadError as err:
            self.complain('%s', err)
            return EXIT_ATOM_FAILED
        except emulator.AtomFailure as err:
            self.complain('%s', err)
            self._print_report(err.report, err.report.profile)
            self._write_report(err.report)
            return EXIT_ATOM_FAILED
        self._print_report(report_, report_.profile)
        self._write_report(report_)
        if report_.recorded_id is not None:
            self.say('recorded %s', report_.recorded_id)
        return EXIT_OK

    def _print_report(self, report_, profile):
        self.say('ttc=%.3fs profiled=%.3fs difference=%+.1f%% groups=%d '
                 'block=%d', report_.ttc_s, profile.ttc_s,
                 report.percent_difference(report_.ttc_s, profile.ttc_s),
                 len(report_.groups), report_.block_bytes)
        for name, deviation in sorted(report_.deviations().items()):
            self.say('  %s planned=%d consumed=%d deviation=%+.1f%%', name,
                     report_.planned[name], report_.consumed[name],
                     deviation * 100)

    def _write_report(self, report_):
        if self.args.report:
            with open(self.args.report, 'wb') as stream:
                stream.write(formats.ReportFormat.encode(report_))

    def _commands(self):
        commands = list(self.args.commands)
        if self.args.command:
            commands.append(target_command(self.args))
        if not commands:
            raise UsageError('No command given; use --command or --')
        return commands

    def _variant_keys(self, command):
        if not self.args.variant:
            return [self.key(command)]
        return [self.key(command, [t for t in variant.split(',') if t])
                for variant in self.args.variant]

    def cmd_report(self):
        store = self.store()
        kind = self.args.kind
        try:
            if kind == 'overhead':
                configurations = [
                    (report.label(self.key(command)),
                     self.key(command, self.args.plain_tag),
                     self.key(command, self.args.profiled_tag))
                    for command in self._commands()]
                rows = report.overhead_rows(store, configurations)
                columns, plot = report.OVERHEAD_COLUMNS, (
                    'plain_ttc_s', 'profiled_ttc_s')
            elif kind == 'consistency':
                keys = [key for command in self._commands()
                        for key in self._variant_keys(command)]
                rows = report.consistency_rows(store, keys)
                columns, plot = report.CONSISTENCY_COLUMNS, (
                    'instructions_cv', 'peak_bytes_cv')
            elif kind == 'fidelity':
                keys = [key for command in self._commands()
                        for key in self._variant_keys(command)]
                rows = report.fidelity_rows(store, keys)
                columns, plot = report.FIDELITY_COLUMNS, (
                    'original_ttc_s', 'emulated_ttc_s')
            else:
                profile = store.select(self.key(), self.args.created_at)
                rows = report.profile_rows(profile)
                columns, plot = report.PROFILE_COLUMNS, None
        except store_.ProfileNotFound as err:
            self.complain('%s', err)
            return EXIT_NO_PROFILE

        if self.args.output:
            with open(self.args.output, 'w') as stream:
                report.write_csv(rows, columns, stream)
        else:
            report.write_csv(rows, columns, self.stdout)
        if self.args.svg:
            x = 'index' if plot is None else 'configuration'
            report.plot_svg(rows, x, plot or ('instructions',),
                            self.args.svg, title=kind)
        return EXIT_OK

    def cmd_stress(self):
        args = self.args
        if not (args.cpu or args.disk or args.mem):
            return EXIT_OK
        try:
            load = emulator.background_load(
                args.cpu, args.disk, args.mem, args.scratch,
                args.block_size or config_.DEFAULT_BLOCK_BYTES)
        except emulator.LoadError as err:
            self.complain('%s', err)
            return EXIT_ATOM_FAILED
        try:
            load.hold(args.duration)
        except KeyboardInterrupt:
            pass
        finally:
            load.release()
        return EXIT_OK

    def run(self):
        handler = getattr(self, 'cmd_%s' % self.args.subcommand)
        try:
            return handler()
        except (UsageError, config_.ConfigError) as err:
            self.complain('%s', err)
            return EXIT_USAGE
        except (store_.Error, emulator.Error, report.Error, sampler.Error,
                telemetry.Error) as err:
            self.complain('%s', err)
            return EXIT_ERROR


def main(argv=None, backend=None, environ=None, stdout=None, stderr=None):
    """Run the command line and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    command = []
    if '--' in argv:
        split = argv.index('--')
        argv, command = argv[:split], argv[split + 1:]
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return err.code or 0
    args.command = command
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        cli = Cli(args, backend, environ, stdout, stderr)
    except config_.ConfigError as err:
        (stderr or sys.stderr).write('pyworkload: %s\n' % err)
        return EXIT_USAGE
    return cli.run()
