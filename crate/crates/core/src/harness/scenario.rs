//! The line-oriented scenario format.
//!
//! ```text
//! name lseek-race
//! config tsx=on copy_args=off
//! file /tmp/a [sensitive] [wrpkru] ["content"]
//! spawn t1
//! t0: open /tmp/a 0 as fd expect ok
//! t1: close @fd expect ok|deny
//! t0: forkbomb expect fault rand:bypass
//! ```
//!
//! Arguments are integers (decimal or hex), quoted strings (`\xHH` escapes
//! allowed), bare paths, symbolic constants joined with `|`, or `@name[+off]`
//! references to values bound earlier with `as name` or built in (see
//! [`BUILTIN_BINDINGS`]). `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formal_state::Tid;
use crate::syscall_monitor::SyscallTable;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        msg: msg.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Ok,
    Deny,
    Fault,
    Bypass,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expect::Ok => "ok",
            Expect::Deny => "deny",
            Expect::Fault => "fault",
            Expect::Bypass => "bypass",
        })
    }
}

impl FromStr for Expect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(Expect::Ok),
            "deny" => Ok(Expect::Deny),
            "fault" => Ok(Expect::Fault),
            "bypass" => Ok(Expect::Bypass),
            other => Err(format!("unknown expectation {other:?}")),
        }
    }
}

/// Accepted outcomes, with optional overrides per gate family
/// (`rand`, `eph`, `cet`) or per exact variant string.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub default: BTreeSet<Expect>,
    pub overrides: BTreeMap<String, BTreeSet<Expect>>,
}

impl Expectation {
    /// What counts as a pass under `variant` (e.g. `secc_rand:32`).
    pub fn for_variant(&self, variant: &str) -> &BTreeSet<Expect> {
        let family = variant_family(variant);
        self.overrides
            .get(variant)
            .or_else(|| self.overrides.get(family))
            .unwrap_or(&self.default)
    }
}

/// `rand`, `eph` or `cet` for a variant string.
pub fn variant_family(variant: &str) -> &'static str {
    if variant.contains("rand") {
        "rand"
    } else if variant.ends_with("cet") {
        "cet"
    } else {
        "eph"
    }
}

fn parse_expect_set(line: usize, s: &str) -> Result<BTreeSet<Expect>, ParseError> {
    s.split('|')
        .map(|e| e.parse().or_else(|m: String| err(line, m)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgExpr {
    Int(u64),
    /// A bare word (paths, keywords).
    Str(String),
    /// A quoted string, as raw bytes.
    Bytes(Vec<u8>),
    Bind {
        name: String,
        offset: u64,
    },
}

/// Names always bound when a scenario starts.
pub const BUILTIN_BINDINGS: &[&str] = &[
    "secret",
    "flag",
    "monitor_code",
    "app_code",
    "trampoline",
    "gate_entry",
    "signal_entry",
];

const HARNESS_VERBS: &[&str] = &[
    "load",
    "store",
    "iovec",
    "exec-wrpkru",
    "jump-pad",
    "direct-jump",
    "tsx-scan",
    "forkbomb",
    "forge",
    "signal",
    "sigreturn",
    "syscall-interrupted",
    "create-domain",
    "isolate-lib",
    "xcall",
    "xreturn",
    "grant",
    "revoke",
    "exfil",
    "leak",
    "spawn-direct",
];

pub fn is_harness_verb(verb: &str) -> bool {
    HARNESS_VERBS.contains(&verb)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub line: usize,
    pub tid: Tid,
    pub verb: String,
    pub args: Vec<ArgExpr>,
    pub bind: Option<String>,
    pub expect: Expectation,
}

impl Event {
    pub fn is_syscall(&self) -> bool {
        !is_harness_verb(&self.verb)
    }

    /// Binding names this event needs before it can run.
    pub fn needs(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|a| match a {
            ArgExpr::Bind { name, .. } => Some(name.as_str()),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSetup {
    pub path: String,
    pub sensitive: bool,
    pub content: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub config: BTreeMap<String, String>,
    pub files: Vec<FileSetup>,
    /// Threads besides t0, in creation order.
    pub spawns: Vec<Tid>,
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn threads(&self) -> Vec<Tid> {
        std::iter::once(0)
            .chain(self.spawns.iter().copied())
            .collect()
    }

    /// Events of `tid` in program order.
    pub fn thread_events(&self, tid: Tid) -> Vec<&Event> {
        self.events.iter().filter(|e| e.tid == tid).collect()
    }
}

const CONFIG_KEYS: &[&str] = &["tsx", "copy_args", "scan_syscall", "sensitive", "explore"];

fn symbol(name: &str) -> Option<u64> {
    use crate::signal_virt::*;
    use crate::syscall_monitor::*;
    Some(match name {
        "PROT_NONE" => 0,
        "PROT_READ" => PROT_READ,
        "PROT_WRITE" => PROT_WRITE,
        "PROT_EXEC" => PROT_EXEC,
        "MAP_SHARED" => MAP_SHARED,
        "MAP_PRIVATE" => MAP_PRIVATE,
        "MAP_FIXED" => MAP_FIXED,
        "MAP_ANONYMOUS" => MAP_ANONYMOUS,
        "MREMAP_MAYMOVE" => MREMAP_MAYMOVE,
        "MREMAP_FIXED" => MREMAP_FIXED,
        "O_RDONLY" => 0,
        "O_WRONLY" => 1,
        "O_RDWR" => 2,
        "O_CREAT" => 0o100,
        "CLONE_VM" => CLONE_VM,
        "CLONE_THREAD" => CLONE_THREAD,
        "SEEK_SET" => 0,
        "SEEK_CUR" => 1,
        "SEEK_END" => 2,
        "SIG_BLOCK" => 0,
        "SIG_UNBLOCK" => 1,
        "SIG_SETMASK" => 2,
        "PR_SET_SECCOMP" => PR_SET_SECCOMP,
        "PR_SET_SYSCALL_USER_DISPATCH" => PR_SET_SYSCALL_USER_DISPATCH,
        "SIGINT" => SIGINT as u64,
        "SIGKILL" => SIGKILL as u64,
        "SIGUSR1" => SIGUSR1 as u64,
        "SIGSEGV" => SIGSEGV as u64,
        "SIGUSR2" => SIGUSR2 as u64,
        "SIGCHLD" => SIGCHLD as u64,
        "SIGSTOP" => SIGSTOP as u64,
        "SIGSYS" => SIGSYS as u64,
        _ => return None,
    })
}

fn parse_int(s: &str) -> Option<u64> {
    if let Some(v) = s.strip_prefix('-') {
        return parse_int(v).map(|v| v.wrapping_neg());
    }
    match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

fn parse_arg(line: usize, tok: &Token) -> Result<ArgExpr, ParseError> {
    let word = match tok {
        Token::Quoted(bytes) => return Ok(ArgExpr::Bytes(bytes.clone())),
        Token::Word(w) => w.as_str(),
    };
    if let Some(rest) = word.strip_prefix('@') {
        let (name, offset) = match rest.split_once('+') {
            Some((n, off)) => match parse_int(off) {
                Some(o) => (n, o),
                None => return err(line, format!("bad offset in {word:?}")),
            },
            None => (rest, 0),
        };
        if name.is_empty() {
            return err(line, "empty binding name");
        }
        return Ok(ArgExpr::Bind {
            name: name.to_string(),
            offset,
        });
    }
    if let Some(v) = parse_int(word) {
        return Ok(ArgExpr::Int(v));
    }
    if word.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
        let mut v = 0;
        for part in word.split('|') {
            match symbol(part) {
                Some(x) => v |= x,
                None => return err(line, format!("unknown constant {part:?}")),
            }
        }
        return Ok(ArgExpr::Int(v));
    }
    Ok(ArgExpr::Str(word.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Word(String),
    /// Raw bytes of a quoted string.
    Quoted(Vec<u8>),
}

fn tokenize(line: usize, text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '#' {
            break;
        }
        if c == '"' {
            chars.next();
            let mut bytes = Vec::new();
            loop {
                match chars.next() {
                    None => return err(line, "unterminated string"),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('x') => {
                            let hex: String = chars.by_ref().take(2).collect();
                            match u8::from_str_radix(&hex, 16) {
                                Ok(b) if hex.len() == 2 => bytes.push(b),
                                _ => return err(line, format!("bad escape \\x{hex}")),
                            }
                        }
                        Some('n') => bytes.push(b'\n'),
                        Some('0') => bytes.push(0),
                        Some(c @ ('\\' | '"')) => bytes.push(c as u8),
                        other => {
                            return err(line, format!("bad escape \\{}", other.unwrap_or(' ')))
                        }
                    },
                    Some(c) => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
            out.push(Token::Quoted(bytes));
            continue;
        }
        let mut word = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() || c == '"' {
                break;
            }
            word.push(c);
            chars.next();
        }
        out.push(Token::Word(word));
    }
    Ok(out)
}

fn parse_tid(line: usize, s: &str) -> Result<Tid, ParseError> {
    s.strip_prefix('t')
        .and_then(|n| n.parse().ok())
        .map_or_else(|| err(line, format!("bad thread {s:?}")), Ok)
}

fn word(tok: &Token) -> Option<&str> {
    match tok {
        Token::Word(w) => Some(w),
        Token::Quoted(_) => None,
    }
}

/// Parses scenario text. Syscall verbs are checked against the bundled
/// syscall table.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let table = SyscallTable::builtin();
    let mut sc = Scenario::default();
    let mut known: BTreeSet<Tid> = BTreeSet::from([0]);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks = tokenize(line, raw)?;
        let Some(first) = toks.first() else {
            continue;
        };
        let Some(head) = word(first) else {
            return err(line, "line starts with a string");
        };
        match head {
            "name" => {
                let rest: Vec<&str> = toks[1..].iter().filter_map(word).collect();
                if rest.is_empty() {
                    return err(line, "missing scenario name");
                }
                sc.name = rest.join(" ");
            }
            "config" => {
                for t in &toks[1..] {
                    let w = word(t).ok_or_else(|| ParseError {
                        line,
                        msg: "config takes key=value pairs".into(),
                    })?;
                    let Some((k, v)) = w.split_once('=') else {
                        return err(line, format!("expected key=value, got {w:?}"));
                    };
                    if !CONFIG_KEYS.contains(&k) {
                        return err(line, format!("unknown config key {k:?}"));
                    }
                    sc.config.insert(k.to_string(), v.to_string());
                }
            }
            "spawn" => {
                for t in &toks[1..] {
                    let w = word(t).unwrap_or("");
                    let tid = parse_tid(line, w)?;
                    let want = sc.spawns.len() as Tid + 1;
                    if tid != want {
                        return err(
                            line,
                            format!("threads are spawned in order; expected t{want}"),
                        );
                    }
                    known.insert(tid);
                    sc.spawns.push(tid);
                }
            }
            "file" => {
                let path = toks.get(1).and_then(word).ok_or_else(|| ParseError {
                    line,
                    msg: "file needs a path".into(),
                })?;
                let mut f = FileSetup {
                    path: path.to_string(),
                    sensitive: false,
                    content: Vec::new(),
                };
                for t in &toks[2..] {
                    match t {
                        Token::Word(w) if w == "sensitive" => f.sensitive = true,
                        Token::Word(w) if w == "wrpkru" => {
                            f.content.extend_from_slice(&crate::syscall_monitor::WRPKRU)
                        }
                        Token::Quoted(b) => f.content.extend_from_slice(b),
                        Token::Word(w) => return err(line, format!("unknown file flag {w:?}")),
                    }
                }
                sc.files.push(f);
            }
            _ => {
                let Some(t) = head.strip_suffix(':') else {
                    return err(line, format!("unknown directive {head:?}"));
                };
                let tid = parse_tid(line, t)?;
                if !known.contains(&tid) {
                    return err(line, format!("t{tid} used before it is spawned"));
                }
                sc.events.push(parse_event(line, tid, &toks[1..], &table)?);
            }
        }
    }
    if sc.name.is_empty() {
        sc.name = "unnamed".into();
    }
    Ok(sc)
}

fn parse_event(
    line: usize,
    tid: Tid,
    toks: &[Token],
    table: &SyscallTable,
) -> Result<Event, ParseError> {
    let verb = toks.first().and_then(word).ok_or_else(|| ParseError {
        line,
        msg: "missing verb".into(),
    })?;
    if !is_harness_verb(verb) && table.classify(verb).is_err() {
        return err(line, format!("unknown verb {verb:?}"));
    }
    let mut args = Vec::new();
    let mut bind = None;
    let mut expect = None;
    let mut rest = toks[1..].iter();
    while let Some(t) = rest.next() {
        match word(t) {
            Some("as") => {
                let name = rest.next().and_then(word).ok_or_else(|| ParseError {
                    line,
                    msg: "`as` needs a name".into(),
                })?;
                bind = Some(name.to_string());
            }
            Some("expect") => {
                let mut e = Expectation::default();
                let first = rest.next().and_then(word).ok_or_else(|| ParseError {
                    line,
                    msg: "`expect` needs an outcome".into(),
                })?;
                e.default = parse_expect_set(line, first)?;
                for t in rest.by_ref() {
                    let w = word(t).unwrap_or("");
                    let Some((k, v)) = w.split_once(':') else {
                        return err(line, format!("expected variant:outcome, got {w:?}"));
                    };
                    e.overrides
                        .insert(k.to_string(), parse_expect_set(line, v)?);
                }
                expect = Some(e);
            }
            _ if bind.is_some() => return err(line, "arguments after `as`"),
            _ => args.push(parse_arg(line, t)?),
        }
    }
    let Some(expect) = expect else {
        return err(line, "missing `expect`");
    };
    Ok(Event {
        line,
        tid,
        verb: verb.to_string(),
        args,
        bind,
        expect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_event() {
        let sc = parse_scenario("t0: open /tmp/a expect ok").unwrap();
        assert_eq!(sc.events.len(), 1);
        let e = &sc.events[0];
        assert_eq!(e.verb, "open");
        assert_eq!(e.args, vec![ArgExpr::Str("/tmp/a".into())]);
        assert_eq!(e.expect.default, BTreeSet::from([Expect::Ok]));
    }

    #[test]
    fn unknown_verb_is_a_parse_error() {
        let e = parse_scenario("\n\nt0: frobnicate 1 expect ok").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("frobnicate"));
    }

    #[test]
    fn threads_must_be_spawned_first() {
        assert_eq!(parse_scenario("t1: getpid expect ok").unwrap_err().line, 1);
        assert!(parse_scenario("spawn t1\nt1: getpid expect ok").is_ok());
        assert!(parse_scenario("spawn t2").is_err());
    }

    #[test]
    fn arguments_and_overrides() {
        let sc = parse_scenario(
            "t0: mmap 0 0x1000 PROT_READ|PROT_WRITE MAP_PRIVATE|MAP_ANONYMOUS -1 0 as buf expect ok\n\
             t0: store @buf+8 \"a\\x0f\" expect ok|fault rand:bypass secc_cet:deny",
        )
        .unwrap();
        assert_eq!(
            sc.events[0].args,
            vec![
                ArgExpr::Int(0),
                ArgExpr::Int(0x1000),
                ArgExpr::Int(3),
                ArgExpr::Int(0x22),
                ArgExpr::Int(u64::MAX),
                ArgExpr::Int(0)
            ]
        );
        assert_eq!(sc.events[0].bind.as_deref(), Some("buf"));
        let e = &sc.events[1];
        assert_eq!(
            e.args,
            vec![
                ArgExpr::Bind {
                    name: "buf".into(),
                    offset: 8
                },
                ArgExpr::Bytes(vec![b'a', 0x0f])
            ]
        );
        assert_eq!(
            e.expect.for_variant("secc_eph"),
            &BTreeSet::from([Expect::Ok, Expect::Fault])
        );
        assert_eq!(
            e.expect.for_variant("secc_rand:32"),
            &BTreeSet::from([Expect::Bypass])
        );
        assert_eq!(
            e.expect.for_variant("secc_cet"),
            &BTreeSet::from([Expect::Deny])
        );
        assert_eq!(
            e.expect.for_variant("disp_cet"),
            &BTreeSet::from([Expect::Ok, Expect::Fault])
        );
    }

    #[test]
    fn setup_lines() {
        let sc = parse_scenario(
            "name demo\nconfig tsx=on copy_args=off\nfile /etc/shadow sensitive \"x\"\nfile /lib.so wrpkru\n# comment\n",
        )
        .unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.config["tsx"], "on");
        assert!(sc.files[0].sensitive);
        assert_eq!(sc.files[1].content, crate::syscall_monitor::WRPKRU.to_vec());
        assert!(parse_scenario("config bogus=1").is_err());
        assert!(parse_scenario("t0: getpid").is_err());
        assert!(parse_scenario("t0: store \"abc expect ok").is_err());
    }
}
