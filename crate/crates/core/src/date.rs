use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A calendar day identified by year and 1-based day of year.
///
/// Ordering is lexicographic on `(year, day_of_year)`, which matches
/// chronological order. Serialised as ISO-8601 `YYYY-MM-DD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalendarDate {
    year: i32,
    day_of_year: u32,
}

impl CalendarDate {
    pub fn new(year: i32, day_of_year: u32) -> Result<Self> {
        NaiveDate::from_yo_opt(year, day_of_year)
            .map(|_| Self { year, day_of_year })
            .ok_or_else(|| Error::InvalidDate(format!("{year} day {day_of_year}")))
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(year, month, day)
            .map(Self::from_naive)
            .ok_or_else(|| Error::InvalidDate(format!("{year}-{month:02}-{day:02}")))
    }

    fn from_naive(d: NaiveDate) -> Self {
        Self {
            year: d.year(),
            day_of_year: d.ordinal(),
        }
    }

    fn naive(self) -> NaiveDate {
        NaiveDate::from_yo_opt(self.year, self.day_of_year).expect("validated on construction")
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn day_of_year(self) -> u32 {
        self.day_of_year
    }

    /// Days since 0001-01-01 (day 1 of the proleptic Gregorian calendar).
    pub fn ordinal_days(self) -> i64 {
        self.naive().num_days_from_ce() as i64
    }

    pub fn from_ordinal_days(days: i64) -> Result<Self> {
        i32::try_from(days)
            .ok()
            .and_then(NaiveDate::from_num_days_from_ce_opt)
            .map(Self::from_naive)
            .ok_or_else(|| Error::InvalidDate(format!("ordinal day {days}")))
    }

    /// Signed difference `self - other` in days.
    pub fn days_since(self, other: CalendarDate) -> i64 {
        self.ordinal_days() - other.ordinal_days()
    }

    pub fn add_days(self, days: i64) -> Self {
        Self::from_ordinal_days(self.ordinal_days() + days).expect("date arithmetic in range")
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.naive().format("%Y-%m-%d"))
    }
}

impl FromStr for CalendarDate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
            .map(Self::from_naive)
            .map_err(|e| Error::InvalidDate(format!("{s}: {e}")))
    }
}

impl Serialize for CalendarDate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalendarDate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_days() {
        assert!(CalendarDate::new(2021, 366).is_err());
        assert!(CalendarDate::new(2020, 366).is_ok());
        assert!(CalendarDate::new(2020, 0).is_err());
    }

    #[test]
    fn iso_round_trip_and_ordering() {
        let d: CalendarDate = "2020-03-01".parse().unwrap();
        assert_eq!(d.day_of_year(), 61);
        assert_eq!(d.to_string(), "2020-03-01");
        let e = d.add_days(306);
        assert_eq!(e, CalendarDate::new(2021, 1).unwrap());
        assert!(d < e);
        assert_eq!(e.days_since(d), 306);
    }

    #[test]
    fn serde_uses_iso_strings() {
        let d = CalendarDate::new(2021, 32).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, "\"2021-02-01\"");
        assert_eq!(serde_json::from_str::<CalendarDate>(&s).unwrap(), d);
    }
}
