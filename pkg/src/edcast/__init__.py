"""Hourly ED census forecasting: GP engine, Lasso baselines, rolling backtest."""

__version__ = "0.1.0"
