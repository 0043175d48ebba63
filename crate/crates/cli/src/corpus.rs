//! Built-in chat lines for the template backend's word statistics.

use ghostline_core::model::TemplateRules;
use ghostline_core::orchestrator::Backend;

pub const DEFAULT_CORPUS: &[&str] = &[
    "see you at the station later",
    "see you at the park tomorrow",
    "see you soon",
    "see you tonight at the usual place",
    "hello there how are you",
    "hello there my friend",
    "hello how was your day",
    "how are you doing today",
    "how was the meeting",
    "how was your weekend",
    "thanks a lot for the help",
    "thanks so much for dinner",
    "thank you for the lovely gift",
    "i am on my way",
    "i am running a bit late",
    "i will call you later",
    "i will be there in ten minutes",
    "let me know when you get home",
    "let me know if you need anything",
    "are you free this weekend",
    "are you coming to the party",
    "can you pick up some milk",
    "can we talk later tonight",
    "what time does the movie start",
    "what are you doing tonight",
    "good morning have a great day",
    "good night sleep well",
    "happy birthday to you",
    "sounds good to me",
    "that sounds like a great plan",
    "no worries at all",
    "sorry i missed your call",
    "miss you already",
    "love you too",
    "talk to you soon",
    "have a safe trip home",
    "don't forget the keys",
    "just got home",
    "on the train now",
    "dinner is ready",
];

/// Template backend over [`DEFAULT_CORPUS`] and the standard attribute rules.
pub fn default_template_backend() -> Backend {
    Backend::Template {
        corpus: DEFAULT_CORPUS.iter().map(|s| s.to_string()).collect(),
        rules: TemplateRules::standard(),
    }
}
