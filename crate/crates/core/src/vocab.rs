//! Character-level vocabulary with reserved control symbols.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

const TABLE_HEADER: &str = "dlpt-vocab v1";

/// Content glyphs of the shared task vocabulary (60 symbols, 64 with the reserved ids).
pub const SHARED_GLYPHS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 :+-*=,.;()[]<>?!/|_#ANS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pad,
    Mask,
    Eos,
    Bos,
    Content,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Pad => "pad",
            Role::Mask => "mask",
            Role::Eos => "eos",
            Role::Bos => "bos",
            Role::Content => "content",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pad" => Role::Pad,
            "mask" => Role::Mask,
            "eos" => Role::Eos,
            "bos" => Role::Bos,
            "content" => Role::Content,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    glyphs: Vec<String>,
    roles: Vec<Role>,
    pub pad_id: TokenId,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
    pub bos_id: TokenId,
    lookup: HashMap<char, TokenId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    glyphs: Vec<String>,
    roles: Vec<Role>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_parts(r.glyphs, r.roles)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            glyphs: v.glyphs,
            roles: v.roles,
        }
    }
}

impl Vocab {
    /// Reserved ids 0..4 (pad, mask, eos, bos) followed by one id per character of `content`.
    pub fn from_content(content: &str) -> Result<Self> {
        let mut glyphs: Vec<String> = ["<pad>", "<mask>", "<eos>", "<bos>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut roles = vec![Role::Pad, Role::Mask, Role::Eos, Role::Bos];
        for c in content.chars() {
            glyphs.push(c.to_string());
            roles.push(Role::Content);
        }
        Self::from_parts(glyphs, roles)
    }

    /// The 64-symbol vocabulary shared by every task.
    pub fn shared() -> Self {
        Self::from_content(SHARED_GLYPHS).expect("shared glyph set is valid")
    }

    fn from_parts(glyphs: Vec<String>, roles: Vec<Role>) -> Result<Self> {
        if glyphs.len() != roles.len() {
            return Err(Error::InvalidInput("glyph and role counts differ".into()));
        }
        let find = |role: Role| -> Result<TokenId> {
            let ids: Vec<usize> = roles
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == role)
                .map(|(i, _)| i)
                .collect();
            match ids.as_slice() {
                [id] => Ok(*id as TokenId),
                _ => Err(Error::InvalidInput(format!(
                    "vocabulary needs exactly one {} id, found {}",
                    role.as_str(),
                    ids.len()
                ))),
            }
        };
        let pad_id = find(Role::Pad)?;
        let mask_id = find(Role::Mask)?;
        let eos_id = find(Role::Eos)?;
        let bos_id = find(Role::Bos)?;
        if glyphs.len() < 6 {
            return Err(Error::InvalidInput(format!("vocabulary size {} < 6", glyphs.len())));
        }
        let mut lookup = HashMap::new();
        for (i, (g, r)) in glyphs.iter().zip(&roles).enumerate() {
            if *r != Role::Content {
                continue;
            }
            let mut chars = g.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::InvalidInput(format!(
                    "content glyph {g:?} is not a single character"
                )));
            };
            if lookup.insert(c, i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate glyph {c:?}")));
            }
        }
        Ok(Self {
            glyphs,
            roles,
            pad_id,
            mask_id,
            eos_id,
            bos_id,
            lookup,
        })
    }

    pub fn size(&self) -> usize {
        self.glyphs.len()
    }

    pub fn content_size(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Content).count()
    }

    pub fn role(&self, id: TokenId) -> Option<Role> {
        self.roles.get(id as usize).copied()
    }

    pub fn glyph(&self, id: TokenId) -> &str {
        self.glyphs.get(id as usize).map(String::as_str).unwrap_or("<?>")
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.lookup.get(&c).copied()
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Content)
            .map(|(i, _)| i as TokenId)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .map(|c| {
                self.id_of(c)
                    .ok_or_else(|| Error::InvalidInput(format!("glyph {c:?} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    /// Renders ids back to text; reserved ids render as their bracketed glyph.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.glyph(i)).collect()
    }

    /// Renders ids up to (not including) the first eos; pads are dropped.
    pub fn decode_answer(&self, ids: &[TokenId]) -> String {
        ids[..effective_len(ids, self.eos_id)]
            .iter()
            .filter(|&&i| i != self.pad_id)
            .map(|&i| self.glyph(i))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for (i, (g, r)) in self.glyphs.iter().zip(&self.roles).enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}", escape_glyph(g), r.as_str());
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TABLE_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "expected vocabulary header {TABLE_HEADER:?}, got {other:?}"
                )))
            }
        }
        let mut glyphs = Vec::new();
        let mut roles = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, glyph, role] = fields.as_slice() else {
                return Err(Error::Format(format!("vocabulary line {}: {line:?}", n + 2)));
            };
            let id: usize = id.parse().map_err(|_| Error::Format(format!("bad id {id:?}")))?;
            if id != glyphs.len() {
                return Err(Error::Format(format!(
                    "vocabulary ids must be dense and ordered; got {id} at row {}",
                    glyphs.len()
                )));
            }
            glyphs.push(unescape_glyph(glyph)?);
            roles.push(Role::parse(role).ok_or_else(|| Error::Format(format!("bad role {role:?}")))?);
        }
        Self::from_parts(glyphs, roles)
    }
}

fn escape_glyph(g: &str) -> String {
    let mut out = String::new();
    for c in g.chars() {
        match c {
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_glyph(g: &str) -> Result<String> {
    let mut out = String::new();
    let mut chars = g.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            other => return Err(Error::Format(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

/// Index of the first eos token, or the full length when none is present.
pub fn effective_len(ids: &[TokenId], eos_id: TokenId) -> usize {
    ids.iter().position(|&t| t == eos_id).unwrap_or(ids.len())
}

/// A clean token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// The prefix before the first eos.
    pub fn truncated_at_eos(&self, eos_id: TokenId) -> TokenSeq {
        TokenSeq(self.0[..effective_len(&self.0, eos_id)].to_vec())
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab.size()) {
            Some(t) => Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of size {}",
                vocab.size()
            ))),
            None => Ok(()),
        }
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_vocab_has_64_symbols() {
        let v = Vocab::shared();
        assert_eq!(v.size(), 64);
        assert_eq!(v.content_size(), 60);
        let reserved = [v.pad_id, v.mask_id, v.eos_id, v.bos_id];
        for (i, a) in reserved.iter().enumerate() {
            for b in &reserved[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(Vocab::from_content("a").is_err());
        assert!(Vocab::from_content("ab").is_ok());
        assert!(Vocab::from_content("aa").is_err());
    }

    #[test]
    fn table_round_trip() {
        let v = Vocab::shared();
        let text = v.to_table();
        assert!(text.contains("\\s\tcontent"));
        let back = Vocab::from_table(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id_of(' '), v.id_of(' '));
    }

    #[test]
    fn table_rejects_bad_header_and_gaps() {
        assert!(Vocab::from_table("vocab\n0\t<pad>\tpad\n").is_err());
        let text = Vocab::shared().to_table().replace("\n5\t", "\n7\t");
        assert!(Vocab::from_table(&text).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::shared();
        let s = v.encode("copy: ab").unwrap();
        assert_eq!(v.decode(s.ids()), "copy: ab");
        assert!(v.encode("é").is_err());
        let mut ids = v.encode("42").unwrap().0;
        ids.push(v.eos_id);
        ids.push(v.pad_id);
        assert_eq!(v.decode_answer(&ids), "42");
    }
}
