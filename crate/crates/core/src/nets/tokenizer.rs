//! CLIP's byte-level BPE tokenizer.

use std::collections::HashMap;
use std::io::Read;

use flate2::read::GzDecoder;
use regex::Regex;

use crate::error::{Result, XaiError};

static BUNDLED_MERGES: &[u8] = include_bytes!("../../assets/bpe_simple_vocab_16e6.txt.gz");

const MERGE_COUNT: usize = 49152 - 256 - 2;

pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

impl ClipTokenizer {
    pub fn bundled() -> Result<Self> {
        let mut text = String::new();
        GzDecoder::new(BUNDLED_MERGES).read_to_string(&mut text)?;
        Self::from_merges(&text)
    }

    /// Builds the vocabulary from the merges file (first line is a version header).
    pub fn from_merges(text: &str) -> Result<Self> {
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .take(MERGE_COUNT)
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(XaiError::InvalidInput(format!("bad merge line `{l}`"))),
                }
            })
            .collect::<Result<_>>()?;
        let byte_encoder = bytes_to_unicode();
        let mut vocab: Vec<String> = byte_encoder.iter().map(|c| c.to_string()).collect();
        vocab.extend(byte_encoder.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let encoder: HashMap<String, u32> = vocab
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            sot: encoder["<|startoftext|>"],
            eot: encoder["<|endoftext|>"],
            encoder,
            ranks,
            byte_encoder,
            pattern,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    /// Token ids without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                ids.push(self.encoder[&piece]);
            }
        }
        ids
    }

    /// Start marker, tokens, end marker, zero padding to `context_length`.
    pub fn tokenize(&self, text: &str, context_length: usize) -> Result<Vec<u32>> {
        let mut ids = vec![self.sot];
        ids.extend(self.encode(text));
        ids.push(self.eot);
        if ids.len() > context_length {
            return Err(XaiError::InvalidInput(format!(
                "caption `{text}` needs {} tokens, context holds {context_length}",
                ids.len()
            )));
        }
        ids.resize(context_length, 0);
        Ok(ids)
    }
}
