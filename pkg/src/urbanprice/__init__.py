"""Learn virtual prices for public facilities from known housing prices."""

__version__ = "0.1.0"
