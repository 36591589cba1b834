"""Tests for mpoe."""
