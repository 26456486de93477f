//! JSON output with fixed float formatting, so artifacts are byte-stable
//! and round-trip every `f64`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::Result;

/// Integral values print as `3.0`, everything else with 17 significant digits.
fn write_float<W: ?Sized + Write>(writer: &mut W, value: f64) -> io::Result<()> {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        write!(writer, "{value:.1}")
    } else {
        write!(writer, "{value:.16e}")
    }
}

struct Compact(CompactFormatter);
struct Pretty<'a>(PrettyFormatter<'a>);

macro_rules! delegate_formatter {
    ($ty:ty) => {
        impl Formatter for $ty {
            fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
                write_float(w, value)
            }
            fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
                write_float(w, value as f64)
            }
            fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.begin_array(w)
            }
            fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.end_array(w)
            }
            fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
                self.0.begin_array_value(w, first)
            }
            fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.end_array_value(w)
            }
            fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.begin_object(w)
            }
            fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.end_object(w)
            }
            fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
                self.0.begin_object_key(w, first)
            }
            fn end_object_key<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.end_object_key(w)
            }
            fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.begin_object_value(w)
            }
            fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.end_object_value(w)
            }
        }
    };
}

delegate_formatter!(Compact);
delegate_formatter!(Pretty<'_>);

/// Single-line JSON.
pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Compact(CompactFormatter));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}

/// Indented JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Pretty(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}

/// Writes `contents` next to `path` and renames it into place, so a failed
/// run never leaves a partial file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = fs::write(&tmp, contents).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
