"""Test package for armfleet."""
