//! Porter suffix-stripping stemmer over lowercase ASCII words.
//!
//! Words containing anything other than `a..z` are returned unchanged.

fn is_consonant(w: &[u8], i: usize) -> bool {
    match w[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => i == 0 || !is_consonant(w, i - 1),
        _ => true,
    }
}

/// Number of vowel-consonant sequences in `w[..end]`.
fn measure(w: &[u8], end: usize) -> usize {
    let mut m = 0;
    let mut i = 0;
    while i < end && is_consonant(w, i) {
        i += 1;
    }
    loop {
        while i < end && !is_consonant(w, i) {
            i += 1;
        }
        if i >= end {
            return m;
        }
        while i < end && is_consonant(w, i) {
            i += 1;
        }
        m += 1;
    }
}

fn has_vowel(w: &[u8], end: usize) -> bool {
    (0..end).any(|i| !is_consonant(w, i))
}

fn double_consonant(w: &[u8], end: usize) -> bool {
    end >= 2 && w[end - 1] == w[end - 2] && is_consonant(w, end - 1)
}

/// consonant-vowel-consonant ending where the last is not w, x or y.
fn cvc(w: &[u8], end: usize) -> bool {
    end >= 3
        && is_consonant(w, end - 3)
        && !is_consonant(w, end - 2)
        && is_consonant(w, end - 1)
        && !matches!(w[end - 1], b'w' | b'x' | b'y')
}

struct Word(Vec<u8>);

impl Word {
    fn ends(&self, s: &str) -> bool {
        self.0.ends_with(s.as_bytes())
    }

    fn stem_len(&self, suffix: &str) -> usize {
        self.0.len() - suffix.len()
    }

    fn set(&mut self, suffix: &str, repl: &str) {
        let n = self.stem_len(suffix);
        self.0.truncate(n);
        self.0.extend_from_slice(repl.as_bytes());
    }

    /// Replaces `suffix` when the remaining stem has measure > `min_m`.
    fn replace_if(&mut self, suffix: &str, repl: &str, min_m: usize) -> bool {
        if !self.ends(suffix) {
            return false;
        }
        if measure(&self.0, self.stem_len(suffix)) > min_m {
            self.set(suffix, repl);
        }
        true
    }

    fn step1a(&mut self) {
        if self.ends("sses") {
            self.set("sses", "ss");
        } else if self.ends("ies") {
            self.set("ies", "i");
        } else if self.ends("ss") {
        } else if self.ends("s") {
            self.set("s", "");
        }
    }

    fn step1b(&mut self) {
        if self.ends("eed") {
            if measure(&self.0, self.stem_len("eed")) > 0 {
                self.set("eed", "ee");
            }
            return;
        }
        let stripped = ["ed", "ing"].into_iter().find(|s| self.ends(s) && has_vowel(&self.0, self.stem_len(s)));
        let Some(s) = stripped else { return };
        self.set(s, "");
        if self.ends("at") || self.ends("bl") || self.ends("iz") {
            self.0.push(b'e');
        } else if double_consonant(&self.0, self.0.len()) && !matches!(self.0.last(), Some(b'l' | b's' | b'z')) {
            self.0.pop();
        } else if measure(&self.0, self.0.len()) == 1 && cvc(&self.0, self.0.len()) {
            self.0.push(b'e');
        }
    }

    fn step1c(&mut self) {
        if self.ends("y") && has_vowel(&self.0, self.stem_len("y")) {
            self.set("y", "i");
        }
    }

    fn step2(&mut self) {
        const RULES: [(&str, &str); 20] = [
            ("ational", "ate"),
            ("tional", "tion"),
            ("enci", "ence"),
            ("anci", "ance"),
            ("izer", "ize"),
            ("abli", "able"),
            ("alli", "al"),
            ("entli", "ent"),
            ("eli", "e"),
            ("ousli", "ous"),
            ("ization", "ize"),
            ("ation", "ate"),
            ("ator", "ate"),
            ("alism", "al"),
            ("iveness", "ive"),
            ("fulness", "ful"),
            ("ousness", "ous"),
            ("aliti", "al"),
            ("iviti", "ive"),
            ("biliti", "ble"),
        ];
        for (s, r) in RULES {
            if self.replace_if(s, r, 0) {
                return;
            }
        }
    }

    fn step3(&mut self) {
        const RULES: [(&str, &str); 7] = [
            ("icate", "ic"),
            ("ative", ""),
            ("alize", "al"),
            ("iciti", "ic"),
            ("ical", "ic"),
            ("ful", ""),
            ("ness", ""),
        ];
        for (s, r) in RULES {
            if self.replace_if(s, r, 0) {
                return;
            }
        }
    }

    fn step4(&mut self) {
        const SUFFIXES: [&str; 19] = [
            "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent", "ion", "ou", "ism", "ate",
            "iti", "ous", "ive", "ize",
        ];
        // Longest match wins, so "ement" is tried before "ment" and "ent".
        let mut best: Option<&str> = None;
        for s in SUFFIXES {
            if self.ends(s) && best.is_none_or(|b| s.len() > b.len()) {
                best = Some(s);
            }
        }
        let Some(s) = best else { return };
        let n = self.stem_len(s);
        if measure(&self.0, n) <= 1 {
            return;
        }
        if s == "ion" && !matches!(self.0.get(n.wrapping_sub(1)), Some(b's' | b't')) {
            return;
        }
        self.0.truncate(n);
    }

    fn step5(&mut self) {
        if self.ends("e") {
            let n = self.stem_len("e");
            let m = measure(&self.0, n);
            if m > 1 || (m == 1 && !cvc(&self.0, n)) {
                self.0.truncate(n);
            }
        }
        let n = self.0.len();
        if measure(&self.0, n) > 1 && double_consonant(&self.0, n) && self.0[n - 1] == b'l' {
            self.0.pop();
        }
    }
}

/// One pass of the five Porter steps.
pub fn porter(word: &str) -> String {
    if word.len() <= 2 || !word.bytes().all(|b| b.is_ascii_lowercase()) {
        return word.to_string();
    }
    let mut w = Word(word.as_bytes().to_vec());
    w.step1a();
    w.step1b();
    w.step1c();
    w.step2();
    w.step3();
    w.step4();
    w.step5();
    String::from_utf8(w.0).expect("ascii in, ascii out")
}

/// Porter passes repeated until the word stops changing.
pub fn stem(word: &str) -> String {
    let mut cur = word.to_string();
    loop {
        let next = porter(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}
