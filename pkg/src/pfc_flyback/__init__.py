"""Design, simulation and analysis tools for a CrCM constant-ON-time PFC flyback."""

__version__ = "0.1.0"
