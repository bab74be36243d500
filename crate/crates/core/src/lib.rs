//! Realized-volatility forecasting engine.
//!
//! Daily log realized variance is built from intraday returns
//! ([`market_data`]), turned into HAR and lag regressors ([`features`]) and
//! forecast by linear models under rolling or expanding re-estimation
//! ([`linear_fit`]), tree ensembles ([`ensemble_trees`]) and a feedforward
//! network ([`neural_net`]). Forecasts are scored with statistical losses,
//! realized utility and the model confidence set ([`evaluation`]).
//! [`tuning_sweep`] runs hyperparameter searches and the fitting-scheme grid,
//! and [`synthetic`] simulates HAR panels for testing.

pub mod ensemble_trees;
pub mod evaluation;
pub mod features;
pub mod linalg;
pub mod linear_fit;
pub mod market_data;
pub mod neural_net;
pub mod synthetic;
pub mod tuning_sweep;
