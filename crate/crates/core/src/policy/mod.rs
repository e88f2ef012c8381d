//! Command interception policy.
//!
//! A [`PolicySet`] is an ordered list of whitelist and blacklist rules loaded
//! from a TOML document. [`classify`] evaluates every segment of a parsed
//! [`CommandLine`] on its own and reports the most severe class:
//!
//! * a segment matching any blacklist rule is `UNSAFE`;
//! * otherwise a segment matching a whitelist rule is `SAFE`, unless it
//!   carries a parse warning or redirects output into a file;
//! * everything else is `UNCERTAIN`.

mod parser;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parser::{
    parse_command, CommandLine, Connector, ParseError, RedirectKind, Redirection, Segment,
};

/// The policy shipped with the crate.
pub const DEFAULT_POLICY_TOML: &str = include_str!("../../policies/default.toml");

/// Safety class of a command or segment. Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyClass {
    Safe,
    Uncertain,
    Unsafe,
}

impl SafetyClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SafetyClass::Safe => "SAFE",
            SafetyClass::Uncertain => "UNCERTAIN",
            SafetyClass::Unsafe => "UNSAFE",
        }
    }
}

impl fmt::Display for SafetyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleClass {
    Whitelist,
    Blacklist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Program,
    Prefix,
    Glob,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub id: String,
    pub class: RuleClass,
    #[serde(rename = "match")]
    pub match_kind: MatchKind,
    pub pattern: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone)]
enum Matcher {
    Program(glob::Pattern),
    Prefix(Vec<String>),
    Glob(glob::Pattern),
    Regex(regex::Regex),
}

impl Matcher {
    fn compile(rule: &PolicyRule) -> Result<Self, String> {
        match rule.match_kind {
            MatchKind::Program => glob::Pattern::new(&rule.pattern)
                .map(Matcher::Program)
                .map_err(|e| e.to_string()),
            MatchKind::Glob => glob::Pattern::new(&rule.pattern)
                .map(Matcher::Glob)
                .map_err(|e| e.to_string()),
            MatchKind::Regex => regex::Regex::new(&rule.pattern)
                .map(Matcher::Regex)
                .map_err(|e| e.to_string()),
            MatchKind::Prefix => {
                let words: Vec<String> = rule.pattern.split_whitespace().map(String::from).collect();
                if words.is_empty() {
                    Err("prefix pattern has no words".to_string())
                } else {
                    Ok(Matcher::Prefix(words))
                }
            }
        }
    }

    fn matches(&self, seg: &Segment, text: &str) -> bool {
        match self {
            Matcher::Program(p) => p.matches(seg.program()),
            Matcher::Glob(p) => p.matches(text),
            Matcher::Regex(r) => r.is_match(text),
            Matcher::Prefix(words) => {
                if seg.argv.len() < words.len() {
                    return false;
                }
                std::iter::once(seg.program())
                    .chain(seg.argv[1..].iter().map(String::as_str))
                    .zip(words)
                    .all(|(a, b)| a == b)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: PolicyRule,
    matcher: Matcher,
}

/// A validated, immutable rule set. Rule order is significant.
#[derive(Debug, Clone)]
pub struct PolicySet {
    version: String,
    rules: Vec<CompiledRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    version: String,
    #[serde(default)]
    rules: Vec<PolicyRule>,
}

#[derive(Debug, Error)]
pub enum PolicyLoadError {
    #[error("POLICY_PARSE_ERROR at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("DUPLICATE_RULE_ID: rule id `{0}` appears more than once")]
    DuplicateRuleId(String),
    #[error("INVALID_PATTERN: rule `{id}` pattern `{pattern}`: {reason}")]
    InvalidPattern {
        id: String,
        pattern: String,
        reason: String,
    },
    #[error("IO_ERROR: reading policy {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PolicyLoadError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyLoadError::Parse { .. } => "POLICY_PARSE_ERROR",
            PolicyLoadError::DuplicateRuleId(_) => "DUPLICATE_RULE_ID",
            PolicyLoadError::InvalidPattern { .. } => "INVALID_PATTERN",
            PolicyLoadError::Io { .. } => "IO_ERROR",
        }
    }
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

impl PolicySet {
    /// A policy with no rules: every command classifies `UNCERTAIN`.
    pub fn empty() -> Self {
        PolicySet {
            version: "empty".into(),
            rules: Vec::new(),
        }
    }

    pub fn default_policy() -> Self {
        Self::from_toml(DEFAULT_POLICY_TOML).expect("shipped default policy is valid")
    }

    pub fn from_toml(source: &str) -> Result<Self, PolicyLoadError> {
        let doc: PolicyDocument = toml::from_str(source).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(source, s.start));
            PolicyLoadError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        Self::from_rules(doc.version, doc.rules)
    }

    pub fn from_path(path: &Path) -> Result<Self, PolicyLoadError> {
        let source = std::fs::read_to_string(path).map_err(|source| PolicyLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&source)
    }

    pub fn from_rules(version: String, rules: Vec<PolicyRule>) -> Result<Self, PolicyLoadError> {
        let mut seen = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if !seen.insert(rule.id.clone()) {
                return Err(PolicyLoadError::DuplicateRuleId(rule.id));
            }
            let matcher = Matcher::compile(&rule).map_err(|reason| PolicyLoadError::InvalidPattern {
                id: rule.id.clone(),
                pattern: rule.pattern.clone(),
                reason,
            })?;
            compiled.push(CompiledRule { rule, matcher });
        }
        Ok(PolicySet {
            version,
            rules: compiled,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn rules(&self) -> impl Iterator<Item = &PolicyRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn first_match(&self, class: RuleClass, seg: &Segment, text: &str) -> Option<&PolicyRule> {
        self.rules
            .iter()
            .filter(|r| r.rule.class == class)
            .find(|r| r.matcher.matches(seg, text))
            .map(|r| &r.rule)
    }
}

impl Default for PolicySet {
    fn default() -> Self {
        Self::default_policy()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDecision {
    pub index: usize,
    pub class: SafetyClass,
    pub rule_id: Option<String>,
    /// Why a whitelisted segment was not classified SAFE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Result of classifying a command line. `class` is the maximum over segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub class: SafetyClass,
    pub matched_rule_ids: Vec<String>,
    pub per_segment: Vec<SegmentDecision>,
}

impl PolicyDecision {
    /// Rule id of the first segment that was blocked, if any.
    pub fn violation(&self) -> Option<&SegmentDecision> {
        self.per_segment.iter().find(|s| s.class == SafetyClass::Unsafe)
    }
}

fn loosen(text: &str) -> String {
    text.replace("$(", "  ")
        .replace(['`', '(', ')', ';', '&', '|', '{', '}'], " ")
}

fn classify_segment(index: usize, seg: &Segment, policy: &PolicySet) -> SegmentDecision {
    let text = seg.match_text();
    let blocked = policy.first_match(RuleClass::Blacklist, seg, &text).or_else(|| {
        // Commands nested in substitutions or groups are not split into
        // segments; expose them to the blacklist as separate words.
        let loose = loosen(&text);
        (loose != text)
            .then(|| policy.first_match(RuleClass::Blacklist, seg, &loose))
            .flatten()
    });
    if let Some(rule) = blocked {
        return SegmentDecision {
            index,
            class: SafetyClass::Unsafe,
            rule_id: Some(rule.id.clone()),
            note: None,
        };
    }
    let whitelisted = policy.first_match(RuleClass::Whitelist, seg, &text);
    let note = if !seg.warnings.is_empty() {
        Some(format!("unsupported construct: {}", seg.warnings.join("; ")))
    } else if let Some(r) = seg.redirections.iter().find(|r| r.writes_file()) {
        Some(format!("writes to `{}` through redirection", r.target))
    } else {
        None
    };
    let class = match (whitelisted, &note) {
        (Some(_), None) => SafetyClass::Safe,
        _ => SafetyClass::Uncertain,
    };
    SegmentDecision {
        index,
        class,
        rule_id: whitelisted.map(|r| r.id.clone()),
        note: if whitelisted.is_some() { note } else { None },
    }
}

/// Classifies every segment independently and takes the most severe class.
pub fn classify(cmd: &CommandLine, policy: &PolicySet) -> PolicyDecision {
    let per_segment: Vec<SegmentDecision> = cmd
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| classify_segment(i, seg, policy))
        .collect();
    let class = per_segment
        .iter()
        .map(|s| s.class)
        .max()
        .unwrap_or(SafetyClass::Uncertain);
    let mut matched_rule_ids: Vec<String> = Vec::new();
    for id in per_segment.iter().filter_map(|s| s.rule_id.as_ref()) {
        if !matched_rule_ids.contains(id) {
            matched_rule_ids.push(id.clone());
        }
    }
    PolicyDecision {
        class,
        matched_rule_ids,
        per_segment,
    }
}

/// Parses and classifies in one step.
pub fn classify_raw(raw: &str, policy: &PolicySet) -> Result<(CommandLine, PolicyDecision), ParseError> {
    let cmd = parse_command(raw)?;
    let decision = classify(&cmd, policy);
    Ok((cmd, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class_of(raw: &str) -> SafetyClass {
        classify_raw(raw, &PolicySet::default_policy()).unwrap().1.class
    }

    #[test]
    fn reference_examples() {
        assert_eq!(class_of("rm -rf /"), SafetyClass::Unsafe);
        assert_eq!(class_of("git status"), SafetyClass::Safe);
        assert_eq!(class_of("ls"), SafetyClass::Safe);
        assert_eq!(class_of("pip install requests"), SafetyClass::Uncertain);
        assert_eq!(class_of("sed -i 's/a/b/' f"), SafetyClass::Uncertain);
        assert_eq!(class_of("mkfs /dev/sda"), SafetyClass::Unsafe);
        assert_eq!(class_of("git status && rm -rf /"), SafetyClass::Unsafe);
    }

    #[test]
    fn compound_matches_per_segment_max() {
        let policy = PolicySet::default_policy();
        let raw = "git status && rm -rf /";
        let (cmd, decision) = classify_raw(raw, &policy).unwrap();
        let oracle = cmd
            .segments
            .iter()
            .map(|s| class_of(&s.to_shell()))
            .max()
            .unwrap();
        assert_eq!(decision.class, oracle);
        assert_eq!(decision.per_segment[0].class, SafetyClass::Safe);
        assert_eq!(decision.per_segment[1].class, SafetyClass::Unsafe);
        assert_eq!(decision.violation().unwrap().rule_id.as_deref(), Some("bl-rm-root"));
    }

    #[test]
    fn program_rules_strip_directories() {
        assert_eq!(class_of("/bin/rm -rf /"), SafetyClass::Unsafe);
        assert_eq!(class_of("/usr/bin/ls -la"), SafetyClass::Safe);
        assert_eq!(class_of("/sbin/mkfs.ext4 /dev/sdb1"), SafetyClass::Unsafe);
    }

    #[test]
    fn whitelisted_program_writing_a_file_is_uncertain() {
        let policy = PolicySet::default_policy();
        let (_, d) = classify_raw("echo hi > notes.txt", &policy).unwrap();
        assert_eq!(d.class, SafetyClass::Uncertain);
        assert_eq!(d.per_segment[0].rule_id.as_deref(), Some("wl-echo"));
        assert!(d.per_segment[0].note.is_some());
        assert_eq!(class_of("ls 2>/dev/null"), SafetyClass::Safe);
    }

    #[test]
    fn warnings_force_uncertain() {
        assert_eq!(class_of("echo $HOME"), SafetyClass::Uncertain);
        assert_eq!(class_of("ls &"), SafetyClass::Uncertain);
        // Blacklist still wins over a warning.
        assert_eq!(class_of("FOO=1 rm -rf /"), SafetyClass::Unsafe);
        assert_eq!(class_of("(rm -rf /)"), SafetyClass::Unsafe);
    }

    #[test]
    fn nested_interpreter_payloads_hit_regex_rules() {
        assert_eq!(class_of("sh -c 'rm -rf /'"), SafetyClass::Unsafe);
        assert_eq!(class_of("bash -c \"mkfs.ext4 /dev/sda1\""), SafetyClass::Unsafe);
        assert_eq!(class_of("sh -c 'echo x > f'"), SafetyClass::Uncertain);
    }

    #[test]
    fn rm_targets() {
        for raw in ["rm -rf /", "rm -fr /*", "rm -r -f ~", "rm -rf .", "rm -rf ./*", "rm -rf *", "rm / -rf", "rm --recursive --force /", "sudo rm -rf /", "rm --no-preserve-root -rf /"] {
            assert_eq!(class_of(raw), SafetyClass::Unsafe, "{raw}");
        }
        for raw in ["rm -rf build", "rm -f a.txt", "rm -rf ./target", "rm *.pyc", "rm -rf /tmp/cache", "rm ."] {
            assert_eq!(class_of(raw), SafetyClass::Uncertain, "{raw}");
        }
    }

    #[test]
    fn empty_policy_is_never_safe() {
        let empty = PolicySet::empty();
        for raw in ["ls", "git status", "rm -rf /", "echo hi"] {
            let (_, d) = classify_raw(raw, &empty).unwrap();
            assert_eq!(d.class, SafetyClass::Uncertain, "{raw}");
            assert!(d.matched_rule_ids.is_empty());
        }
    }

    #[test]
    fn load_preserves_order() {
        let src = r#"
version = "7"
[[rules]]
id = "a"
class = "blacklist"
match = "program"
pattern = "mkfs"

[[rules]]
id = "b"
class = "whitelist"
match = "program"
pattern = "ls"
"#;
        let p = PolicySet::from_toml(src).unwrap();
        assert_eq!(p.version(), "7");
        let ids: Vec<_> = p.rules().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(p.rules().next().unwrap().class, RuleClass::Blacklist);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let src = r#"
version = "1"
[[rules]]
id = "r1"
class = "blacklist"
match = "program"
pattern = "mkfs"
[[rules]]
id = "r1"
class = "whitelist"
match = "program"
pattern = "ls"
"#;
        let err = PolicySet::from_toml(src).unwrap_err();
        assert_eq!(err.code(), "DUPLICATE_RULE_ID");
    }

    #[test]
    fn invalid_patterns_rejected() {
        for kind in ["regex", "glob", "program"] {
            let src = format!(
                "version = \"1\"\n[[rules]]\nid = \"x\"\nclass = \"blacklist\"\nmatch = \"{kind}\"\npattern = \"[\"\n"
            );
            let err = PolicySet::from_toml(&src).unwrap_err();
            assert_eq!(err.code(), "INVALID_PATTERN", "{kind}");
        }
        let src = "version = \"1\"\n[[rules]]\nid = \"x\"\nclass = \"whitelist\"\nmatch = \"prefix\"\npattern = \"  \"\n";
        assert_eq!(PolicySet::from_toml(src).unwrap_err().code(), "INVALID_PATTERN");
    }

    #[test]
    fn parse_errors_report_position() {
        let src = "version = \"1\"\n[[rules]]\nid = \"x\"\nclass = \"greylist\"\nmatch = \"program\"\npattern = \"ls\"\n";
        match PolicySet::from_toml(src).unwrap_err() {
            PolicyLoadError::Parse { line, column, .. } => {
                assert_eq!(line, 4);
                assert!(column >= 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            PolicySet::from_toml("rules = 3").unwrap_err().code(),
            "POLICY_PARSE_ERROR"
        );
    }

    #[test]
    fn first_match_wins_within_class() {
        let src = r#"
version = "1"
[[rules]]
id = "wide"
class = "whitelist"
match = "glob"
pattern = "git *"
[[rules]]
id = "narrow"
class = "whitelist"
match = "prefix"
pattern = "git status"
"#;
        let p = PolicySet::from_toml(src).unwrap();
        let (_, d) = classify_raw("git status", &p).unwrap();
        assert_eq!(d.per_segment[0].rule_id.as_deref(), Some("wide"));
    }

    #[test]
    fn substitutions_are_searched_by_the_blacklist() {
        let p = PolicySet::default_policy();
        for cmd in [
            "echo $(rm -rf /)",
            "echo `mkfs.ext4 /dev/sda1`",
            "ls \"$(rm -rf ~)\"",
            "echo $(true; rm -rf /)",
        ] {
            let (_, d) = classify_raw(cmd, &p).unwrap();
            assert_eq!(d.class, SafetyClass::Unsafe, "{cmd}");
        }
        let (_, d) = classify_raw("echo $(date)", &p).unwrap();
        assert_eq!(d.class, SafetyClass::Uncertain);
    }

    #[test]
    fn prefix_is_word_aligned() {
        assert_eq!(class_of("git statusx"), SafetyClass::Uncertain);
        assert_eq!(class_of("git status --short"), SafetyClass::Safe);
        assert_eq!(class_of("git push"), SafetyClass::Uncertain);
    }

    fn word() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("ls".to_string()),
            Just("git".to_string()),
            Just("status".to_string()),
            Just("rm".to_string()),
            Just("-rf".to_string()),
            Just("/".to_string()),
            Just("pip".to_string()),
            Just("install".to_string()),
            Just("echo".to_string()),
            Just("mkfs".to_string()),
            "[a-z]{1,6}",
            "[a-zA-Z0-9 ._/'\"-]{1,8}",
        ]
    }

    fn segment_text() -> impl Strategy<Value = String> {
        prop::collection::vec(word(), 1..5).prop_map(|ws| {
            ws.iter()
                .map(|w| shlex::try_quote(w).unwrap().into_owned())
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    fn connector() -> impl Strategy<Value = &'static str> {
        prop_oneof![Just("&&"), Just("||"), Just(";"), Just("|")]
    }

    fn command_text() -> impl Strategy<Value = String> {
        (segment_text(), prop::collection::vec((connector(), segment_text()), 0..4)).prop_map(
            |(first, rest)| {
                let mut s = first;
                for (c, seg) in rest {
                    s.push(' ');
                    s.push_str(c);
                    s.push(' ');
                    s.push_str(&seg);
                }
                s
            },
        )
    }

    proptest! {
        #[test]
        fn classify_is_deterministic_and_max_of_segments(raw in command_text()) {
            let policy = PolicySet::default_policy();
            let (cmd, d1) = classify_raw(&raw, &policy).unwrap();
            let (_, d2) = classify_raw(&raw, &policy).unwrap();
            prop_assert_eq!(&d1, &d2);
            let max = d1.per_segment.iter().map(|s| s.class).max().unwrap();
            prop_assert_eq!(d1.class, max);
            prop_assert_eq!(d1.per_segment.len(), cmd.segments.len());
            if d1.class == SafetyClass::Unsafe {
                prop_assert!(d1.per_segment.iter().any(|s| s.class == SafetyClass::Unsafe));
            }
            if d1.class == SafetyClass::Safe {
                prop_assert!(d1.per_segment.iter().all(|s| s.rule_id.is_some()));
            }
        }

        #[test]
        fn appending_a_segment_never_lowers_severity(raw in command_text(), extra in segment_text(), c in connector()) {
            let policy = PolicySet::default_policy();
            let before = classify_raw(&raw, &policy).unwrap().1.class;
            let after = classify_raw(&format!("{raw} {c} {extra}"), &policy).unwrap().1.class;
            prop_assert!(after >= before);
        }

        #[test]
        fn reserialized_commands_reparse_identically(raw in command_text()) {
            let first = parse_command(&raw).unwrap();
            let again = parse_command(&first.to_shell()).unwrap();
            prop_assert_eq!(first.segments, again.segments);
        }
    }
}
