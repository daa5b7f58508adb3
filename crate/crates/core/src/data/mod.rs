//! Dataset ingestion, chronological splitting, standardization, sliding
//! windows, calendar features, and the forecast-exchange file.

mod calendar;
mod dataset;
mod forecasts;
mod stats;
mod windows;

pub use calendar::{calendar_features, CALENDAR_FEATURES};
pub use dataset::{
    load_csv, parse_timestamp, split_chronological, write_csv, CsvLayout, SplitRatios,
    TimeSeriesDataset, TIMESTAMP_FORMAT,
};
pub use forecasts::{join_forecasts, read_forecasts, write_forecasts, ForecastRecord};
pub use stats::{destandardize, standardize, ChannelStats};
pub use windows::{make_windows, WindowInstance};
