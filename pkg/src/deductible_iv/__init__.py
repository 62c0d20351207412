"""Family deductible cost-sharing simulator and residual-inclusion IV toolkit."""

__version__ = "0.1.0"
