"""Test suite for the DVM multiagent framework."""
