//! ANSI escape removal for CI logs.

use std::borrow::Cow;

const ESC: char = '\x1b';
const BEL: char = '\x07';

enum State {
    Text,
    Escape,
    Csi,
    Osc,
    OscEscape,
}

/// Removes CSI (`ESC [ ... final`) and OSC (`ESC ] ... BEL|ESC \`) sequences
/// plus any other two-character escape. The output never contains `ESC`, so
/// stripping is idempotent.
pub fn strip_ansi(s: &str) -> Cow<'_, str> {
    if !s.contains(ESC) {
        return Cow::Borrowed(s);
    }
    let mut out = String::with_capacity(s.len());
    let mut state = State::Text;
    for c in s.chars() {
        state = match state {
            State::Text if c == ESC => State::Escape,
            State::Text => {
                out.push(c);
                State::Text
            }
            State::Escape => match c {
                '[' => State::Csi,
                ']' => State::Osc,
                ESC => State::Escape,
                // Fe/Fp/Fs escapes: ESC plus one byte in 0x30..=0x7E.
                '\x30'..='\x7e' => State::Text,
                _ => {
                    out.push(c);
                    State::Text
                }
            },
            State::Csi => match c {
                // parameter and intermediate bytes
                '\x20'..='\x3f' => State::Csi,
                '\x40'..='\x7e' => State::Text,
                ESC => State::Escape,
                // malformed sequence: abandon it and keep the byte
                _ => {
                    out.push(c);
                    State::Text
                }
            },
            State::Osc => match c {
                BEL => State::Text,
                ESC => State::OscEscape,
                '\n' => {
                    out.push(c);
                    State::Text
                }
                _ => State::Osc,
            },
            State::OscEscape => match c {
                '\\' => State::Text,
                '[' => State::Csi,
                ']' => State::Osc,
                ESC => State::Escape,
                _ => State::Osc,
            },
        };
    }
    Cow::Owned(out)
}
