"""Lifelong person search on synthetic multi-domain scenes.

Modules: :mod:`synthgen` (data), :mod:`perception` (detector + embedding
model), :mod:`memory` (rehearsal state), :mod:`losses`, :mod:`lifelong`
(training modes), :mod:`evalkit` (metrics and reports) and :mod:`cli`.
"""
from __future__ import annotations

__version__ = "0.1.0"
