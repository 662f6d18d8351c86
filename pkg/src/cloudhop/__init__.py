"""cloudhop: censorship-circumvention proxy over ephemeral serverless bridges."""

__version__ = "0.1.0"
