//! Time representation, the value model and variable declarations.
//!
//! All time is integer nanoseconds. Data timestamps (as carried on the wire)
//! are nanoseconds since the Unix epoch; simulation time is nanoseconds since
//! the scenario epoch, obtained through [`epoch_map`].

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const NANOS_PER_MICRO: u64 = 1_000;
pub const NANOS_PER_MILLI: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimeError {
    #[error("timestamp {text:?}: invalid {field}")]
    Timestamp { text: String, field: &'static str },
    #[error("data timestamp {data_ts} precedes scenario epoch {epoch}")]
    Underflow { data_ts: i64, epoch: i64 },
    #[error("duration {text:?}: {reason}")]
    Duration { text: String, reason: &'static str },
    #[error("timestamp {0} ns is outside the representable calendar range")]
    OutOfRange(i64),
}

/// A span of time in nanoseconds. Never negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Duration(u64);

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        Duration(nanos)
    }

    pub const fn from_micros(us: u64) -> Self {
        Duration(us * NANOS_PER_MICRO)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Duration(ms * NANOS_PER_MILLI)
    }

    pub const fn from_secs(s: u64) -> Self {
        Duration(s * NANOS_PER_SEC)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub const fn as_micros(self) -> u64 {
        self.0 / NANOS_PER_MICRO
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn saturating_sub(self, other: Duration) -> Duration {
        Duration(self.0.saturating_sub(other.0))
    }

    pub fn checked_mul(self, factor: u64) -> Option<Duration> {
        self.0.checked_mul(factor).map(Duration)
    }

    pub fn to_std(self) -> std::time::Duration {
        std::time::Duration::from_nanos(self.0)
    }

    pub fn from_std(d: std::time::Duration) -> Self {
        Duration(u64::try_from(d.as_nanos()).unwrap_or(u64::MAX))
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

impl AddAssign for Duration {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

const UNITS: [(&str, u64); 5] = [
    ("s", NANOS_PER_SEC),
    ("ms", NANOS_PER_MILLI),
    ("us", NANOS_PER_MICRO),
    ("µs", NANOS_PER_MICRO),
    ("ns", 1),
];

/// Parses `<number><unit>` with unit one of `s`, `ms`, `us`/`µs`, `ns`.
/// The number may carry a decimal fraction as long as the result is a
/// whole number of nanoseconds (`0.2s`, `1.5ms`).
impl FromStr for Duration {
    type Err = TimeError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |reason| TimeError::Duration {
            text: text.to_string(),
            reason,
        };
        let s = text.trim();
        let split = s
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .ok_or_else(|| err("missing unit suffix (ns, us, ms, s)"))?;
        let (number, unit) = s.split_at(split);
        let scale = UNITS
            .iter()
            .find(|(u, _)| *u == unit.trim())
            .map(|(_, scale)| *scale)
            .ok_or_else(|| err("unknown unit (expected ns, us, ms or s)"))?;
        let (whole, frac) = match number.split_once('.') {
            Some((w, f)) => (w, f),
            None => (number, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(err("missing number"));
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| err("invalid number"))?
        };
        let mut nanos = whole.checked_mul(scale).ok_or_else(|| err("overflow"))?;
        let mut place = scale;
        for digit in frac.chars() {
            let d = digit.to_digit(10).ok_or_else(|| err("invalid number"))? as u64;
            if place % 10 != 0 {
                return Err(err("finer than one nanosecond"));
            }
            place /= 10;
            nanos = nanos
                .checked_add(d * place)
                .ok_or_else(|| err("overflow"))?;
        }
        Ok(Duration(nanos))
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "0s");
        }
        for (unit, scale) in [
            ("s", NANOS_PER_SEC),
            ("ms", NANOS_PER_MILLI),
            ("us", NANOS_PER_MICRO),
        ] {
            if self.0 % scale == 0 {
                return write!(f, "{}{}", self.0 / scale, unit);
            }
        }
        write!(f, "{}ns", self.0)
    }
}

impl Serialize for Duration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Duration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Nanos(u64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Nanos(n) => Ok(Duration(n)),
        }
    }
}

/// A point on the simulation time axis, nanoseconds since the scenario epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        SimTime(nanos)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    /// Elapsed span from `earlier` to `self`, or `None` if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> Option<Duration> {
        self.0.checked_sub(earlier.0).map(Duration)
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<Duration> for SimTime {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = Duration;
    /// Saturates at zero.
    fn sub(self, rhs: SimTime) -> Duration {
        Duration(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Duration(self.0))
    }
}

/// Maps a data timestamp (ns since Unix epoch) onto the simulation axis.
pub fn epoch_map(data_ts: i64, scenario_epoch: i64) -> Result<SimTime, TimeError> {
    if data_ts < scenario_epoch {
        return Err(TimeError::Underflow {
            data_ts,
            epoch: scenario_epoch,
        });
    }
    // i128 keeps the difference exact for any pair of i64 timestamps.
    let delta = data_ts as i128 - scenario_epoch as i128;
    Ok(SimTime(delta as u64))
}

/// Inverse of [`epoch_map`].
pub fn sim_to_epoch(t: SimTime, scenario_epoch: i64) -> i64 {
    scenario_epoch.saturating_add(t.as_nanos().min(i64::MAX as u64) as i64)
}

struct Cursor<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, field: &'static str) -> TimeError {
        TimeError::Timestamp {
            text: self.text.to_string(),
            field,
        }
    }

    fn digits(&mut self, n: usize, field: &'static str) -> Result<u32, TimeError> {
        let end = self.pos + n;
        if end > self.bytes.len() || !self.bytes[self.pos..end].iter().all(u8::is_ascii_digit) {
            return Err(self.err(field));
        }
        let v = self.text[self.pos..end].parse().map_err(|_| self.err(field))?;
        self.pos = end;
        Ok(v)
    }

    fn expect(&mut self, allowed: &[u8], field: &'static str) -> Result<u8, TimeError> {
        match self.bytes.get(self.pos) {
            Some(b) if allowed.contains(b) => {
                self.pos += 1;
                Ok(*b)
            }
            _ => Err(self.err(field)),
        }
    }
}

/// Parses an ISO-8601 / RFC 3339 timestamp into nanoseconds since the Unix
/// epoch. Requires an explicit `Z` or `±HH:MM` offset; up to nine fractional
/// digits are accepted.
pub fn parse_timestamp(text: &str) -> Result<i64, TimeError> {
    let mut c = Cursor {
        text,
        bytes: text.as_bytes(),
        pos: 0,
    };
    let year = c.digits(4, "year")?;
    c.expect(b"-", "date separator")?;
    let month = c.digits(2, "month")?;
    c.expect(b"-", "date separator")?;
    let day = c.digits(2, "day")?;
    c.expect(b"Tt ", "date/time separator")?;
    let hour = c.digits(2, "hour")?;
    c.expect(b":", "time separator")?;
    let minute = c.digits(2, "minute")?;
    c.expect(b":", "time separator")?;
    let second = c.digits(2, "second")?;

    let mut frac_nanos: u32 = 0;
    if c.bytes.get(c.pos) == Some(&b'.') {
        c.pos += 1;
        let start = c.pos;
        while c.bytes.get(c.pos).is_some_and(u8::is_ascii_digit) {
            c.pos += 1;
        }
        let digits = &text[start..c.pos];
        if digits.is_empty() || digits.len() > 9 {
            return Err(c.err("fractional seconds"));
        }
        let v: u32 = digits.parse().map_err(|_| c.err("fractional seconds"))?;
        frac_nanos = v * 10u32.pow(9 - digits.len() as u32);
    }

    let offset_secs: i64 = match c.expect(b"Zz+-", "offset")? {
        b'Z' | b'z' => 0,
        sign => {
            let oh = c.digits(2, "offset")?;
            c.expect(b":", "offset")?;
            let om = c.digits(2, "offset")?;
            if oh > 23 || om > 59 {
                return Err(c.err("offset"));
            }
            let secs = (oh * 3600 + om * 60) as i64;
            if sign == b'-' {
                -secs
            } else {
                secs
            }
        }
    };
    if c.pos != c.bytes.len() {
        return Err(c.err("trailing characters"));
    }

    if !(1..=12).contains(&month) {
        return Err(c.err("month"));
    }
    let date = NaiveDate::from_ymd_opt(year as i32, month, day).ok_or_else(|| c.err("day"))?;
    if hour > 23 {
        return Err(c.err("hour"));
    }
    if minute > 59 {
        return Err(c.err("minute"));
    }
    if second > 59 {
        return Err(c.err("second"));
    }
    let naive = date
        .and_hms_opt(hour, minute, second)
        .ok_or_else(|| c.err("time"))?;
    let secs = naive.and_utc().timestamp() - offset_secs;
    secs.checked_mul(NANOS_PER_SEC as i64)
        .and_then(|n| n.checked_add(frac_nanos as i64))
        .ok_or_else(|| c.err("year"))
}

/// Formats nanoseconds since the Unix epoch as an RFC 3339 UTC string with a
/// trailing `Z`. The fraction is omitted when zero and otherwise printed with
/// 3, 6 or 9 digits, whichever is the shortest exact form.
pub fn format_timestamp(nanos: i64) -> Result<String, TimeError> {
    let dt: DateTime<Utc> = DateTime::from_timestamp(
        nanos.div_euclid(NANOS_PER_SEC as i64),
        nanos.rem_euclid(NANOS_PER_SEC as i64) as u32,
    )
    .ok_or(TimeError::OutOfRange(nanos))?;
    Ok(dt.to_rfc3339_opts(SecondsFormat::AutoSi, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Integer,
    Real,
    Boolean,
    Text,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Integer => "integer",
            ValueKind::Real => "real",
            ValueKind::Boolean => "boolean",
            ValueKind::Text => "text",
        })
    }
}

/// One variable value. Reals compare bitwise so that change detection never
/// misses a `-0.0`/`0.0` flip and `NaN` equals itself.
#[derive(Debug, Clone)]
pub enum Value {
    Integer(i64),
    Real(f64),
    Boolean(bool),
    Text(String),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Integer(_) => ValueKind::Integer,
            Value::Real(_) => ValueKind::Real,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::Text(_) => ValueKind::Text,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<i64> {
        match self {
            Value::Integer(v) => Some(*v),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => a.to_bits() == b.to_bits(),
            (Value::Boolean(a), Value::Boolean(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Integer(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Boolean(v) => write!(f, "{v}"),
            Value::Text(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub kind: ValueKind,
    pub direction: Direction,
}

impl VariableDecl {
    pub fn input(name: impl Into<String>, kind: ValueKind) -> Self {
        VariableDecl {
            name: name.into(),
            kind,
            direction: Direction::Input,
        }
    }

    pub fn output(name: impl Into<String>, kind: ValueKind) -> Self {
        VariableDecl {
            name: name.into(),
            kind,
            direction: Direction::Output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_and_millis() {
        assert_eq!(parse_timestamp("1970-01-01T00:00:00Z").unwrap(), 0);
        assert_eq!(
            parse_timestamp("1970-01-01T00:00:00.002Z").unwrap(),
            2_000_000
        );
    }

    #[test]
    fn offsets_are_applied() {
        assert_eq!(
            parse_timestamp("1970-01-01T01:00:00+01:00").unwrap(),
            0
        );
        assert_eq!(
            parse_timestamp("1969-12-31T23:30:00-00:30").unwrap(),
            0
        );
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("1970-13-01T00:00:00Z", "month"),
            ("1970-02-30T00:00:00Z", "day"),
            ("1970-01-01T24:00:00Z", "hour"),
            ("1970-01-01T00:60:00Z", "minute"),
            ("1970-01-01T00:00:61Z", "second"),
            ("1970-01-01T00:00:00.1234567891Z", "fractional seconds"),
            ("1970-01-01T00:00:00", "offset"),
            ("70-01-01T00:00:00Z", "year"),
            ("1970-01-01T00:00:00Zjunk", "trailing characters"),
        ];
        for (text, field) in cases {
            match parse_timestamp(text) {
                Err(TimeError::Timestamp { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: expected error naming {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn formatting_trims_fraction() {
        assert_eq!(format_timestamp(0).unwrap(), "1970-01-01T00:00:00Z");
        assert_eq!(
            format_timestamp(2_000_000).unwrap(),
            "1970-01-01T00:00:00.002Z"
        );
        assert_eq!(
            format_timestamp(1_500).unwrap(),
            "1970-01-01T00:00:00.000001500Z"
        );
    }

    #[test]
    fn epoch_map_examples() {
        assert_eq!(epoch_map(1000, 1000).unwrap(), SimTime::ZERO);
        assert_eq!(epoch_map(3000, 1000).unwrap(), SimTime::from_nanos(2000));
        assert!(matches!(
            epoch_map(999, 1000),
            Err(TimeError::Underflow { .. })
        ));
    }

    #[test]
    fn duration_suffixes() {
        assert_eq!("2ms".parse::<Duration>().unwrap(), Duration::from_millis(2));
        assert_eq!("100ms".parse::<Duration>().unwrap(), Duration::from_millis(100));
        assert_eq!("2s".parse::<Duration>().unwrap(), Duration::from_secs(2));
        assert_eq!("0.2s".parse::<Duration>().unwrap(), Duration::from_millis(200));
        assert_eq!("1.5ms".parse::<Duration>().unwrap(), Duration::from_micros(1500));
        assert_eq!("250us".parse::<Duration>().unwrap(), Duration::from_micros(250));
        assert_eq!("7ns".parse::<Duration>().unwrap(), Duration::from_nanos(7));
        assert!("100".parse::<Duration>().is_err());
        assert!("1.5ns".parse::<Duration>().is_err());
        assert!("3 fortnights".parse::<Duration>().is_err());
        assert_eq!(Duration::from_millis(2000).to_string(), "2s");
        assert_eq!(Duration::from_micros(1500).to_string(), "1500us");
    }

    #[test]
    fn real_equality_is_bitwise() {
        assert_ne!(Value::Real(0.0), Value::Real(-0.0));
        assert_eq!(Value::Real(f64::NAN), Value::Real(f64::NAN));
        assert_ne!(Value::Integer(1), Value::Real(1.0));
    }
}
