use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::tensor::Tensor;

/// Column order of [`calendar_features`].
pub const CALENDAR_FEATURES: [&str; 5] =
    ["minute_of_hour", "hour_of_day", "day_of_week", "day_of_month", "day_of_year"];

/// `L x 5` matrix of calendar encodings, each scaled to `[-0.5, 0.5]`.
pub fn calendar_features(timestamps: &[NaiveDateTime]) -> Tensor {
    let mut data = Vec::with_capacity(timestamps.len() * 5);
    for ts in timestamps {
        data.push(ts.minute() as f64 / 59.0 - 0.5);
        data.push(ts.hour() as f64 / 23.0 - 0.5);
        data.push(ts.weekday().num_days_from_monday() as f64 / 6.0 - 0.5);
        data.push((ts.day() as f64 - 1.0) / 30.0 - 0.5);
        data.push((ts.ordinal() as f64 - 1.0) / 365.0 - 0.5);
    }
    Tensor::new(vec![timestamps.len(), 5], data).expect("calendar shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_timestamp;

    #[test]
    fn known_dates() {
        // 2016-07-01 was a Friday, day 183 of a leap year.
        let ts = parse_timestamp("2016-07-01 23:59:00").unwrap();
        let f = calendar_features(&[ts]);
        let want = [0.5, 0.5, 4.0 / 6.0 - 0.5, -0.5, 182.0 / 365.0 - 0.5];
        for (a, b) in f.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let ts = parse_timestamp("2018-01-01 00:00:00").unwrap(); // Monday, Jan 1
        assert_eq!(calendar_features(&[ts]).data(), &[-0.5, -0.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn noon() {
        let ts = parse_timestamp("2020-03-10 12:00:00").unwrap();
        assert!((calendar_features(&[ts]).at(0, 1) - 0.021739130434782594).abs() < 1e-15);
    }

    #[test]
    fn hour_column_increases_until_wraparound() {
        let start = parse_timestamp("2020-03-10 05:00:00").unwrap();
        let ts: Vec<_> = (0..24).map(|h| start + chrono::TimeDelta::hours(h)).collect();
        let f = calendar_features(&ts);
        for i in 1..24 {
            let (prev, cur) = (f.at(i - 1, 1), f.at(i, 1));
            if ts[i].hour() == 0 {
                assert!(cur < prev);
            } else {
                assert!(cur > prev);
            }
        }
    }

    #[test]
    fn range_is_bounded() {
        let start = parse_timestamp("2020-01-01 00:00:00").unwrap();
        let ts: Vec<_> = (0..24 * 366).map(|h| start + chrono::TimeDelta::hours(h)).collect();
        let f = calendar_features(&ts);
        assert!(f.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }
}
