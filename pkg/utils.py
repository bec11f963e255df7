#!/usr/bin/env python3
"""
Utility functions for the view-prior reconstruction toolkit.
Config loading, logging setup, error types and seed plumbing shared by every module.
"""

import hashlib
import json
import logging
import os
import platform
import re
import sys
import tempfile
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import yaml
from dotenv import load_dotenv


class VplError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""
    exit_code = 1


class ValidationError(VplError, ValueError):
    """Bad input: config, flags, files or invariant violations of arguments."""
    exit_code = 2


class MeshError(ValidationError):
    """Mesh-level problem (degenerate face, missing mirror pairing, open surface)."""

    def __init__(self, message: str, face_index: Optional[int] = None, mesh_name: Optional[str] = None):
        super().__init__(message)
        self.face_index = face_index
        self.mesh_name = mesh_name


class DatasetError(ValidationError):
    """Dataset layout or manifest problem; `path` names the offending file."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message} ({path})" if path else message)
        self.path = path


class NumericalError(VplError, ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""
    exit_code = 3


_PLACEHOLDER = re.compile(r'\$\{([A-Z_][A-Z0-9_]*)\}')


def _substitute_env_vars(config_content: str) -> str:
    """Replace ${VARIABLE_NAME} placeholders with environment variables."""
    missing = []

    def replace_var(match):
        var_name = match.group(1)
        env_value = os.getenv(var_name)
        if env_value is None:
            missing.append(var_name)
            return match.group(0)
        return env_value

    content = _PLACEHOLDER.sub(replace_var, config_content)
    if missing:
        raise ValidationError(f"Unresolved config placeholders: {', '.join(sorted(set(missing)))}")
    return content


def load_config(config_path: str = "config.yaml") -> Dict:
    """
    Load a YAML (or JSON) config file with environment variable substitution.

    Args:
        config_path: Path to the config file

    Returns:
        Parsed config dictionary (empty dict for an empty file)
    """
    load_dotenv()
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config_content = f.read()
    except OSError as e:
        raise ValidationError(f"Cannot read config {config_path}: {e}")

    config_content = _substitute_env_vars(config_content)
    try:
        config = yaml.safe_load(config_content)
    except yaml.YAMLError as e:
        raise ValidationError(f"Malformed config {config_path}: {e}")

    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ValidationError(f"Config {config_path} must be a mapping at top level")
    return config


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None):
    """Set up logging configuration."""
    handlers = [logging.StreamHandler(sys.stdout)]

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format='[%(asctime)s] %(levelname)s:%(name)s:%(message)s',
        handlers=handlers,
        force=True
    )


KNOWN_SECTIONS = {
    'preset': None,
    'training': {'mode', 'vpl', 'discriminator_mode', 'conditioning', 'texture_prediction',
                 'adversarial_optimization', 'iterations', 'iteration_scale', 'batch_size', 'seed',
                 'image_size', 'network_scale', 'texture_size', 'symmetric', 'symmetry_axis',
                 'silhouette_loss', 'num_workers', 'checkpoint_every', 'log_every', 'sample_every',
                 'iterative_adversarial_weight', 'augment', 'iterations_per_view'},
    'weights': {'lambda_c', 'lambda_d', 'lambda_p', 'n_scales'},
    'optimizer': {'alpha', 'beta1', 'beta2', 'eps'},
    'discriminator': {'batch_norm', 'power_iterations'},
    'renderer': {'fov', 'background', 'supersample'},
    'dataset': {'root'},
    'output': {'dir'},
    'logging': {'level', 'file', 'record_wall_time'},
}


def validate_config(config: Dict) -> List[str]:
    """Validate config structure and return list of errors."""
    errors = []

    for section, value in config.items():
        if section not in KNOWN_SECTIONS:
            errors.append(f"Unknown config section: {section}")
            continue
        allowed = KNOWN_SECTIONS[section]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            errors.append(f"Section '{section}' must be a mapping")
            continue
        for key in value:
            if key not in allowed:
                errors.append(f"Unknown field {section}.{key}")

    return errors


def config_hash(config: Dict) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def spawn_rngs(seed: int, names: List[str]) -> Dict[str, np.random.Generator]:
    """
    Independent random streams derived from one 64-bit seed.

    Each consumer gets its own stream so that switching a feature on or off
    never shifts the draws of another consumer.
    """
    children = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def atomic_write_text(path: str, text: str):
    """Write text to `path` through a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp_', suffix='.part')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def library_versions() -> Dict[str, str]:
    """Versions of the interpreter and numeric stack, recorded in run manifests."""
    versions = {'python': platform.python_version(), 'numpy': np.__version__}
    for module_name in ('scipy', 'PIL', 'matplotlib', 'yaml'):
        try:
            module = __import__(module_name)
            versions[module_name] = getattr(module, '__version__', 'unknown')
        except ImportError:
            versions[module_name] = 'missing'
    return versions


def print_system_info():
    """Print system information and library versions."""
    print(f"\n🖥️  SYSTEM INFORMATION")
    print(f"{'='*40}")
    print(f"Platform: {platform.platform()}")
    print(f"Processor: {platform.processor()}")
    for name, version in library_versions().items():
        print(f"{name}: {version}")
    print(f"Current Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"{'='*40}\n")
