'''
Flat key = value configuration files.

A file may be a plain list of `key = value` lines or an ini file with
sections; in the latter case the section named after the subcommand is
used, falling back to [DEFAULT].  Values read from a file sit between the
built-in defaults and explicit command-line flags.
'''

import configparser
import logging
import os
from typing import Any, Callable, Dict, Iterable, Mapping, Optional

from snmnn.custom_exceptions import ConfigValidationError

logger = logging.getLogger(__name__)

FIXTURE_DIR_ENV = 'SNMNN_FIXTURE_DIR'
DEFAULT_FIXTURE_DIR = 'fixtures'
_IMPLICIT_SECTION = 'snmnn'

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def get_fixture_dir():
    # type: () -> str
    return os.environ.get(FIXTURE_DIR_ENV) or DEFAULT_FIXTURE_DIR


def read_config_file(config_file, section=None):
    # type: (str, Optional[str]) -> Dict[str, str]
    config_file = os.path.abspath(os.path.expanduser(config_file))
    if not os.path.exists(config_file):
        raise ConfigValidationError('config file {} does not exist'.format(config_file))
    with open(config_file, encoding='utf-8') as f:
        text = f.read()

    parser = configparser.ConfigParser(interpolation=None)
    try:
        try:
            parser.read_string(text, source=config_file)
        except configparser.MissingSectionHeaderError:
            parser = configparser.ConfigParser(interpolation=None)
            parser.read_string('[{}]\n{}'.format(_IMPLICIT_SECTION, text), source=config_file)
    except configparser.Error as e:
        raise ConfigValidationError('cannot read config file {}: {}'.format(config_file, e))

    if section is not None and parser.has_section(section):
        settings = dict(parser.items(section))
    elif parser.has_section(_IMPLICIT_SECTION):
        settings = dict(parser.items(_IMPLICIT_SECTION))
    else:
        settings = dict(parser.defaults())
    logger.debug('Read %d setting(s) from %s', len(settings), config_file)
    return settings


def reject_unknown(settings, allowed, source):
    # type: (Mapping[str, Any], Iterable[str], str) -> None
    unknown = sorted(set(settings) - set(allowed))
    if unknown:
        raise ConfigValidationError('{}: unknown key(s): {}'.format(source, ', '.join(unknown)))


def merge(defaults, *layers):
    # type: (Mapping[str, Any], *Mapping[str, Any]) -> Dict[str, Any]
    '''Later layers win; None values in a layer mean "not given".'''
    merged = dict(defaults)
    for layer in layers:
        merged.update((key, value) for (key, value) in layer.items() if value is not None)
    return merged


def _convert(key, value, kind, type_name):
    # type: (str, Any, Callable[[Any], Any], str) -> Any
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigValidationError('{} must be {}, got {!r}'.format(key, type_name, value))


def to_float(key, value):
    # type: (str, Any) -> float
    return _convert(key, value, float, 'a number')


def to_int(key, value):
    # type: (str, Any) -> int
    if isinstance(value, float) and not value.is_integer():
        raise ConfigValidationError('{} must be an integer, got {!r}'.format(key, value))
    return _convert(key, value, int, 'an integer')


def to_bool(key, value):
    # type: (str, Any) -> bool
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigValidationError('{} must be a boolean, got {!r}'.format(key, value))


def to_choice(key, value, choices):
    # type: (str, Any, Iterable[str]) -> str
    choices = list(choices)
    text = str(value).strip().lower()
    if text not in choices:
        raise ConfigValidationError('{} must be one of {}, got {!r}'.format(
            key, ', '.join(choices), value))
    return text
