pub mod annotate;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod labels;
pub mod linearize;
pub mod model;
pub mod pipeline;
pub mod stub;
pub mod text;
pub mod toy;

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
