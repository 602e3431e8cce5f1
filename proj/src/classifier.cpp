#include "retrig/classifier.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "retrig/errors.hpp"

namespace retrig {

using nlohmann::json;

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

std::string lower_ascii(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

// Folds the typographic apostrophe (U+2019) into ASCII so "I’m sorry" matches.
std::string fold_apostrophes(std::string s) {
    static constexpr std::string_view kRightQuote = "\xE2\x80\x99";
    std::size_t pos = 0;
    while ((pos = s.find(kRightQuote, pos)) != std::string::npos) {
        s.replace(pos, kRightQuote.size(), "'");
        ++pos;
    }
    return s;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (is_space(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                words.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) {
        words.push_back(std::move(cur));
    }
    return words;
}

std::string strip_punct(std::string_view w) {
    std::size_t b = 0;
    std::size_t e = w.size();
    auto alnum = [](char c) {
        const auto u = static_cast<unsigned char>(c);
        return std::isalnum(u) != 0 || u >= 0x80;
    };
    while (b < e && !alnum(w[b])) {
        ++b;
    }
    while (e > b && !alnum(w[e - 1])) {
        --e;
    }
    return lower_ascii(w.substr(b, e - b));
}

void check_ratio(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw DataError(std::string("classifier threshold ") + name + " must lie in [0, 1]");
    }
}

}  // namespace

std::string_view verdict_name(Verdict v) {
    switch (v) {
        case Verdict::Denial:
            return "denial";
        case Verdict::Unaffected:
            return "unaffected";
        case Verdict::Gibberish:
            return "gibberish";
    }
    return "unaffected";
}

Verdict parse_verdict(std::string_view name) {
    const auto n = lower_ascii(name);
    if (n == "denial") {
        return Verdict::Denial;
    }
    if (n == "unaffected") {
        return Verdict::Unaffected;
    }
    if (n == "gibberish") {
        return Verdict::Gibberish;
    }
    throw DataError("unknown verdict '" + std::string(name) + "'");
}

void ClassifierConfig::validate() const {
    if (denial_markers.empty()) {
        throw DataError("denial_markers must be non-empty");
    }
    check_ratio(gibberish_rules.max_nonalpha_ratio, "max_nonalpha_ratio");
    check_ratio(gibberish_rules.max_repeat_ngram_ratio, "max_repeat_ngram_ratio");
    check_ratio(gibberish_rules.min_dictionary_word_ratio, "min_dictionary_word_ratio");
}

ClassifierConfig classifier_config_from_json(const json& j) {
    ClassifierConfig c;
    try {
        if (j.contains("denial_markers")) {
            c.denial_markers = j.at("denial_markers").get<std::vector<std::string>>();
        }
        if (j.contains("gibberish_rules")) {
            const auto& g = j.at("gibberish_rules");
            c.gibberish_rules.max_nonalpha_ratio =
                g.value("max_nonalpha_ratio", c.gibberish_rules.max_nonalpha_ratio);
            c.gibberish_rules.max_repeat_ngram_ratio =
                g.value("max_repeat_ngram_ratio", c.gibberish_rules.max_repeat_ngram_ratio);
            c.gibberish_rules.min_dictionary_word_ratio =
                g.value("min_dictionary_word_ratio", c.gibberish_rules.min_dictionary_word_ratio);
        }
        c.scan_window = j.value("scan_window", c.scan_window);
        if (j.contains("dictionary")) {
            for (const auto& w : j.at("dictionary").get<std::vector<std::string>>()) {
                c.dictionary.insert(lower_ascii(w));
            }
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed classifier config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const ClassifierConfig& config) {
    std::vector<std::string> dict(config.dictionary.begin(), config.dictionary.end());
    std::sort(dict.begin(), dict.end());
    return {{"denial_markers", config.denial_markers},
            {"gibberish_rules",
             {{"max_nonalpha_ratio", config.gibberish_rules.max_nonalpha_ratio},
              {"max_repeat_ngram_ratio", config.gibberish_rules.max_repeat_ngram_ratio},
              {"min_dictionary_word_ratio", config.gibberish_rules.min_dictionary_word_ratio}}},
            {"scan_window", config.scan_window},
            {"dictionary", dict}};
}

std::unordered_set<std::string> load_dictionary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open dictionary " + path.string());
    }
    std::unordered_set<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        const auto w = strip_punct(line);
        if (!w.empty()) {
            words.insert(w);
        }
    }
    return words;
}

ClassifierConfig load_classifier_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open classifier config " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed classifier config: " + std::string(e.what()));
    }
    auto config = classifier_config_from_json(j);
    if (j.contains("dictionary_path")) {
        auto dict_path = std::filesystem::path(j["dictionary_path"].get<std::string>());
        if (dict_path.is_relative()) {
            dict_path = path.parent_path() / dict_path;
        }
        auto words = load_dictionary(dict_path);
        config.dictionary.insert(words.begin(), words.end());
    }
    return config;
}

double nonalpha_ratio(std::string_view text) {
    std::size_t total = 0;
    std::size_t nonalpha = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_space(c)) {
            continue;
        }
        if (c >= 0x80) {
            // Count one per code point; non-ASCII letters are not penalized.
            if ((c & 0xC0) == 0x80) {
                continue;
            }
            ++total;
            continue;
        }
        ++total;
        if (std::isalnum(c) == 0) {
            ++nonalpha;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(nonalpha) / static_cast<double>(total);
}

double repeated_trigram_ratio(std::string_view text) {
    const auto words = split_words(lower_ascii(text));
    if (words.size() < 3) {
        return 0.0;
    }
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> grams;
    for (std::size_t i = 0; i + 2 < words.size(); ++i) {
        grams.push_back(words[i] + '\x1f' + words[i + 1] + '\x1f' + words[i + 2]);
        ++counts[grams.back()];
    }
    std::size_t repeated = 0;
    for (const auto& g : grams) {
        if (counts[g] > 1) {
            ++repeated;
        }
    }
    return static_cast<double>(repeated) / static_cast<double>(grams.size());
}

Verdict classify_response(std::string_view text, const ClassifierConfig& config) {
    const auto window = fold_apostrophes(lower_ascii(text.substr(0, config.scan_window)));
    for (const auto& marker : config.denial_markers) {
        if (!marker.empty() && window.find(fold_apostrophes(lower_ascii(marker))) != std::string::npos) {
            return Verdict::Denial;
        }
    }

    const auto words = split_words(text);
    if (words.empty()) {
        return Verdict::Gibberish;
    }
    const auto& rules = config.gibberish_rules;
    if (nonalpha_ratio(text) > rules.max_nonalpha_ratio) {
        return Verdict::Gibberish;
    }
    if (repeated_trigram_ratio(text) > rules.max_repeat_ngram_ratio) {
        return Verdict::Gibberish;
    }
    if (!config.dictionary.empty()) {
        std::size_t considered = 0;
        std::size_t known = 0;
        for (const auto& w : words) {
            const auto s = strip_punct(w);
            if (s.empty()) {
                continue;
            }
            ++considered;
            if (config.dictionary.contains(s)) {
                ++known;
            }
        }
        const double ratio =
            considered == 0 ? 0.0 : static_cast<double>(known) / static_cast<double>(considered);
        if (ratio < rules.min_dictionary_word_ratio) {
            return Verdict::Gibberish;
        }
    }
    return Verdict::Unaffected;
}

}  // namespace retrig
