#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

# pyre-ignore-all-errors[2]: Allow `Any` in type annotations

import logging
import os
import pkgutil
from typing import Any, Callable, Optional, Tuple, TypeVar

import yaml

try:
    from yaml import CSafeDumper as Dumper, CSafeLoader as Loader
except ImportError:
    from yaml import SafeDumper as Dumper, SafeLoader as Loader

logger: logging.Logger = logging.getLogger(__name__)

BIND_ADDR_ENV_VAR: str = "EDGELIFT_BIND_ADDR"
SERVER_ADDR_ENV_VAR: str = "EDGELIFT_SERVER_ADDR"
LIFT_BUDGET_MS_ENV_VAR: str = "EDGELIFT_LIFT_BUDGET_MS"

DEFAULT_BIND_ADDR: str = "127.0.0.1:7700"

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def dump_yaml(obj: Any) -> str:
    return yaml.dump(obj, sort_keys=False, Dumper=Dumper)


def load_yaml(text: str) -> Any:
    try:
        return yaml.load(text, Loader=Loader)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML: {e}") from e


def load_yaml_file(path: str) -> Any:
    try:
        with open(path, "r") as f:
            return load_yaml(f.read())
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e


def load_packaged_yaml(name: str) -> Any:
    """
    Load one of the YAML files shipped under ``edgelift/configs``.
    """
    try:
        data = pkgutil.get_data("edgelift", f"configs/{name}")
    except OSError as e:
        raise ConfigError(f"Packaged config {name} not found.") from e
    if data is None:
        raise ConfigError(f"Packaged config {name} not found.")
    return load_yaml(data.decode("utf-8"))


def env_override(name: str, cast: Callable[[str], T], default: T) -> T:
    """
    Read an override from the environment. Overrides that fail to parse are
    logged and ignored.
    """
    if name not in os.environ:
        return default
    try:
        value = cast(os.environ[name])
        logger.info(f"Using {name}={value} from the environment.")
        return value
    except Exception as e:
        logger.warning(f"Failed to override {name}: {e}.")
        return default


def parse_addr(addr: str, default_port: Optional[int] = None) -> Tuple[str, int]:
    """
    Split ``host:port``. A bare host takes ``default_port``.
    """
    host, sep, port = addr.rpartition(":")
    if not sep:
        if default_port is None:
            raise ConfigError(f"Address {addr!r} has no port.")
        return addr, default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as e:
        raise ConfigError(f"Invalid port in address {addr!r}.") from e
