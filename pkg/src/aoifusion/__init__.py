"""Tightly coupled UWB/IMU trajectory estimation under sparse ranging."""

__version__ = "0.1.0"

GRAVITY = 9.81
SPEED_OF_LIGHT = 299_792_458.0
