"""Trajectory data tools for instrumented-roadway datasets."""
