"""Stateful black-box fuzzing toolkit for a Codesys-v3-style PLC runtime protocol."""

__version__ = "0.1.0"
