use std::collections::BTreeMap;
use std::fmt;

/// A typed routine parameter or scalar result.
///
/// Wire tags: 0 = f64, 1 = i64, 2 = string (u16 length + UTF-8),
/// 3 = bool (one byte, 0 or 1), 4 = matrix handle (u64).
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    F64(f64),
    I64(i64),
    Str(String),
    Bool(bool),
    Matrix(u64),
}

impl ParamValue {
    pub fn tag(&self) -> u8 {
        match self {
            ParamValue::F64(_) => 0,
            ParamValue::I64(_) => 1,
            ParamValue::Str(_) => 2,
            ParamValue::Bool(_) => 3,
            ParamValue::Matrix(_) => 4,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::F64(_) => "f64",
            ParamValue::I64(_) => "i64",
            ParamValue::Str(_) => "string",
            ParamValue::Bool(_) => "bool",
            ParamValue::Matrix(_) => "matrix",
        }
    }
}

/// Floats print in shortest round-trip form, so a logged value parses back
/// to the same bits.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::F64(v) => write!(f, "{v:?}"),
            ParamValue::I64(v) => write!(f, "{v}"),
            ParamValue::Str(v) => write!(f, "{v:?}"),
            ParamValue::Bool(v) => write!(f, "{v}"),
            ParamValue::Matrix(v) => write!(f, "#{v}"),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::F64(v)
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::I64(v)
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Bool(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_owned())
    }
}

impl From<String> for ParamValue {
    fn from(v: String) -> Self {
        ParamValue::Str(v)
    }
}

/// Keyed parameter map. Keys are unique; the encoder writes them in sorted
/// order, the decoder accepts any order but rejects duplicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamMap {
    entries: BTreeMap<String, ParamValue>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<ParamValue>) -> &mut Self {
        self.entries.insert(key.into(), value.into());
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.insert(key, value);
        self
    }

    pub(crate) fn try_insert(&mut self, key: String, value: ParamValue) -> Result<(), String> {
        if self.entries.contains_key(&key) {
            return Err(key);
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.entries.get(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        match self.entries.get(key)? {
            ParamValue::F64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn i64(&self, key: &str) -> Option<i64> {
        match self.entries.get(key)? {
            ParamValue::I64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        match self.entries.get(key)? {
            ParamValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        match self.entries.get(key)? {
            ParamValue::Str(v) => Some(v),
            _ => None,
        }
    }

    /// Collects `{prefix}0, {prefix}1, ...` f64 entries until the first gap.
    pub fn f64_series(&self, prefix: &str) -> Vec<f64> {
        (0..).map_while(|i| self.f64(&format!("{prefix}{i}"))).collect()
    }
}

impl<K: Into<String>, V: Into<ParamValue>> FromIterator<(K, V)> for ParamMap {
    fn from_iter<T: IntoIterator<Item = (K, V)>>(iter: T) -> Self {
        let mut map = ParamMap::new();
        for (k, v) in iter {
            map.insert(k, v);
        }
        map
    }
}
