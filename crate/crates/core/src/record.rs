//! Length-prefixed text records.
//!
//! A record body is a sequence of fields, each laid out as
//!
//! ```text
//! <key> ':' <decimal byte length> ':' <value bytes> '\n'
//! ```
//!
//! Keys are `[a-z0-9_]+`. The length has no leading zeros (a zero-length
//! value is written `0`). Values are opaque bytes, so a record can carry
//! another record verbatim. Field order is fixed by each schema; the reader
//! enforces it, which makes every encoding canonical.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message} at byte {offset}")]
pub struct RecordError {
    pub offset: usize,
    pub message: String,
}

impl RecordError {
    pub fn new(offset: usize, message: impl Into<String>) -> Self {
        RecordError {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts the buffer with a leading byte (format version).
    pub fn with_prefix(prefix: u8) -> Self {
        RecordWriter { buf: vec![prefix] }
    }

    pub fn bytes(&mut self, key: &str, value: &[u8]) -> &mut Self {
        debug_assert!(valid_key(key.as_bytes()), "bad record key {key:?}");
        self.buf.extend_from_slice(key.as_bytes());
        self.buf.push(b':');
        self.buf.extend_from_slice(value.len().to_string().as_bytes());
        self.buf.push(b':');
        self.buf.extend_from_slice(value);
        self.buf.push(b'\n');
        self
    }

    pub fn str(&mut self, key: &str, value: &str) -> &mut Self {
        self.bytes(key, value.as_bytes())
    }

    pub fn display(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.str(key, &value.to_string())
    }

    /// Writes a float in its shortest round-trip form.
    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.str(key, &format_f64(value))
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Shortest decimal text that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_f64(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

fn valid_key(k: &[u8]) -> bool {
    !k.is_empty()
        && k.iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
}

/// Sequential field reader over a record body.
pub struct RecordReader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

/// One decoded field; `offset` is where its key starts in the outer buffer.
#[derive(Debug, Clone, Copy)]
pub struct Field<'a> {
    pub key: &'a str,
    pub value: &'a [u8],
    pub offset: usize,
}

impl<'a> Field<'a> {
    pub fn as_str(&self) -> Result<&'a str, RecordError> {
        std::str::from_utf8(self.value)
            .map_err(|_| RecordError::new(self.offset, format!("field `{}` is not UTF-8", self.key)))
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T, RecordError> {
        let s = self.as_str()?;
        // Canonical integers only: no sign, no leading zeros, no padding.
        if s.is_empty() || s.trim() != s {
            return Err(self.invalid());
        }
        s.parse().map_err(|_| self.invalid())
    }

    pub fn parse_uint<T: std::str::FromStr>(&self) -> Result<T, RecordError> {
        let s = self.as_str()?;
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
            return Err(self.invalid());
        }
        s.parse().map_err(|_| self.invalid())
    }

    pub fn float(&self) -> Result<f64, RecordError> {
        let s = self.as_str()?;
        let v = parse_f64(s).ok_or_else(|| self.invalid())?;
        if format_f64(v) != s {
            return Err(RecordError::new(
                self.offset,
                format!("field `{}` is not in canonical float form", self.key),
            ));
        }
        Ok(v)
    }

    fn invalid(&self) -> RecordError {
        RecordError::new(
            self.offset,
            format!(
                "field `{}` has invalid value {:?}",
                self.key,
                String::from_utf8_lossy(self.value)
            ),
        )
    }
}

impl<'a> RecordReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        RecordReader { data, pos: 0, base: 0 }
    }

    /// Reader whose reported offsets are shifted by `base` (for bodies that
    /// sit inside a larger buffer).
    pub fn with_base(data: &'a [u8], base: usize) -> Self {
        RecordReader { data, pos: 0, base }
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.data.len()
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn next_field(&mut self) -> Result<Field<'a>, RecordError> {
        let start = self.pos;
        let rest = &self.data[self.pos..];
        if rest.is_empty() {
            return Err(RecordError::new(self.offset(), "unexpected end of record"));
        }
        let key_end = rest
            .iter()
            .position(|&b| b == b':')
            .ok_or_else(|| RecordError::new(self.offset(), "unterminated key"))?;
        let key = &rest[..key_end];
        if !valid_key(key) {
            return Err(RecordError::new(self.offset(), "invalid key"));
        }
        let after_key = &rest[key_end + 1..];
        let len_end = after_key
            .iter()
            .take(21)
            .position(|&b| b == b':')
            .ok_or_else(|| RecordError::new(self.offset() + key_end + 1, "unterminated length"))?;
        let len_txt = &after_key[..len_end];
        let len_offset = self.offset() + key_end + 1;
        if len_txt.is_empty() || !len_txt.iter().all(u8::is_ascii_digit) || (len_txt.len() > 1 && len_txt[0] == b'0') {
            return Err(RecordError::new(len_offset, "invalid length"));
        }
        let len: usize = std::str::from_utf8(len_txt)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RecordError::new(len_offset, "invalid length"))?;
        let value_start = key_end + 1 + len_end + 1;
        let avail = rest.len() - value_start;
        if len >= avail {
            // need len value bytes plus the trailing newline
            return Err(RecordError::new(
                self.base + start + value_start,
                format!("value of {len} bytes truncated"),
            ));
        }
        let value = &rest[value_start..value_start + len];
        if rest[value_start + len] != b'\n' {
            return Err(RecordError::new(
                self.base + start + value_start + len,
                "missing field terminator",
            ));
        }
        self.pos = start + value_start + len + 1;
        Ok(Field {
            // keys were validated as ASCII above
            key: std::str::from_utf8(key).expect("ascii key"),
            value,
            offset: self.base + start,
        })
    }

    /// Reads the next field and checks its key.
    pub fn expect(&mut self, key: &str) -> Result<Field<'a>, RecordError> {
        let offset = self.offset();
        let f = self.next_field()?;
        if f.key != key {
            return Err(RecordError::new(
                offset,
                format!("expected field `{key}`, found `{}`", f.key),
            ));
        }
        Ok(f)
    }

    /// Reads the next field if it has `key`; leaves the cursor otherwise.
    pub fn optional(&mut self, key: &str) -> Result<Option<Field<'a>>, RecordError> {
        if self.at_end() {
            return Ok(None);
        }
        let save = self.pos;
        let f = self.next_field()?;
        if f.key == key {
            Ok(Some(f))
        } else {
            self.pos = save;
            Ok(None)
        }
    }

    pub fn finish(&self) -> Result<(), RecordError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(RecordError::new(self.offset(), "trailing bytes after record"))
        }
    }
}
