"""Graph-network super-resolution of mesh fields with complementary learning."""

__version__ = "0.1.0"
