"""Small transaction cost asymptotics for the Merton consumption and investment problem."""

__version__ = "0.1.0"
