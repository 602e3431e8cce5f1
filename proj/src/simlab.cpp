#include "retrig/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "retrig/errors.hpp"
#include "retrig/rng.hpp"

namespace retrig::simlab {

using nlohmann::json;

namespace {

double round3(double x) { return std::round(x * 1000.0) / 1000.0; }

json position_to_json(const PositionSelector& p) {
    switch (p.kind) {
        case PositionSelector::Kind::Last:
            return "last";
        case PositionSelector::Kind::Any:
            return "any";
        case PositionSelector::Kind::Exact:
            return p.index;
    }
    return "last";
}

PositionSelector position_from_json(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "last") {
            return {PositionSelector::Kind::Last, 0};
        }
        if (s == "any") {
            return {PositionSelector::Kind::Any, 0};
        }
        throw DataError("unknown position selector '" + s + "'");
    }
    if (j.is_number_integer()) {
        return {PositionSelector::Kind::Exact, j.get<std::int64_t>()};
    }
    throw DataError("position selector must be \"last\", \"any\", or an integer");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

json parse_json_file(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

bool region_matches_position(const Region& r, const DisruptionSpec& d, std::size_t len) {
    const auto resolved = resolve_position(d.position, len);
    return r.layer == d.layer_index && r.position.matches(resolved, len);
}

}  // namespace

bool PositionSelector::matches(std::size_t resolved, std::size_t prompt_length) const {
    switch (kind) {
        case Kind::Any:
            return true;
        case Kind::Last:
            return resolved + 1 == prompt_length;
        case Kind::Exact: {
            const auto len = static_cast<std::int64_t>(prompt_length);
            const auto want = index < 0 ? len + index : index;
            return want == static_cast<std::int64_t>(resolved);
        }
    }
    return false;
}

void LandscapeSpec::validate() const {
    for (const auto& r : regions) {
        if (!(r.lo < r.hi)) {
            throw DataError("landscape '" + prompt_id + "': interval [" + std::to_string(r.lo) +
                            ", " + std::to_string(r.hi) + "] is empty");
        }
        if (r.kind == Region::Kind::AnchorLerp && r.layer != 0) {
            throw DataError("landscape '" + prompt_id + "': anchor regions must use layer 0");
        }
    }
}

bool LandscapeSpec::has_denial() const {
    return std::any_of(regions.begin(), regions.end(),
                       [](const Region& r) { return r.verdict == Verdict::Denial; });
}

json to_json(const LandscapeSpec& spec) {
    json regions = json::array();
    for (const auto& r : spec.regions) {
        json jr = {{"kind", r.kind == Region::Kind::Scalar ? "scalar" : "anchor_lerp"},
                   {"position", position_to_json(r.position)},
                   {"layer", r.layer},
                   {"interval", {r.lo, r.hi}},
                   {"verdict", verdict_name(r.verdict)}};
        if (r.kind == Region::Kind::Scalar) {
            jr["dim"] = r.dim.any ? json("any") : json(r.dim.dim);
        } else {
            jr["anchor_token_id"] = r.anchor_token_id;
        }
        regions.push_back(std::move(jr));
    }
    json j = {{"prompt_id", spec.prompt_id},
              {"regions", std::move(regions)},
              {"gibberish_threshold", spec.gibberish_threshold},
              {"base_reply", spec.base_reply}};
    if (!spec.prompt_text.empty()) {
        j["prompt_text"] = spec.prompt_text;
    }
    return j;
}

LandscapeSpec landscape_from_json(const json& j) {
    LandscapeSpec spec;
    try {
        spec.prompt_id = j.at("prompt_id").get<std::string>();
        spec.prompt_text = j.value("prompt_text", std::string{});
        spec.gibberish_threshold = j.value("gibberish_threshold", kDefaultGibberishThreshold);
        spec.base_reply = j.value("base_reply", std::string(kDefaultBaseReply));
        for (const auto& jr : j.value("regions", json::array())) {
            Region r;
            const auto kind = jr.value("kind", std::string("scalar"));
            if (kind == "scalar") {
                r.kind = Region::Kind::Scalar;
            } else if (kind == "anchor_lerp") {
                r.kind = Region::Kind::AnchorLerp;
                r.anchor_token_id = jr.at("anchor_token_id").get<TokenId>();
            } else {
                throw DataError("unknown region kind '" + kind + "'");
            }
            r.position = position_from_json(jr.value("position", json("last")));
            r.layer = jr.value("layer", 0u);
            const auto dim = jr.value("dim", json("any"));
            if (dim.is_string() && dim.get<std::string>() == "any") {
                r.dim = {true, 0};
            } else {
                r.dim = {false, dim.get<std::uint32_t>()};
            }
            const auto& iv = jr.at("interval");
            if (!iv.is_array() || iv.size() != 2) {
                throw DataError("region interval must be [lo, hi]");
            }
            r.lo = iv[0].get<double>();
            r.hi = iv[1].get<double>();
            r.verdict = parse_verdict(jr.at("verdict").get<std::string>());
            spec.regions.push_back(r);
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed landscape: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::vector<LandscapeSpec> load_landscapes(const std::filesystem::path& path) {
    const auto j = parse_json_file(path);
    const json& list = j.is_object() && j.contains("landscapes") ? j["landscapes"] : j;
    std::vector<LandscapeSpec> specs;
    if (list.is_array()) {
        for (const auto& item : list) {
            specs.push_back(landscape_from_json(item));
        }
    } else {
        specs.push_back(landscape_from_json(list));
    }
    return specs;
}

void write_landscapes(const std::vector<LandscapeSpec>& specs, const std::filesystem::path& path) {
    json list = json::array();
    for (const auto& s : specs) {
        list.push_back(to_json(s));
    }
    write_text(path, list.dump(1) + "\n");
}

Verdict lookup_verdict(const LandscapeSpec& spec, const DisruptionSpec& disruption,
                       std::size_t prompt_length) {
    if (disruption.is_scalar()) {
        const double delta = disruption.scalar().delta;
        if (delta == 0.0) {
            return Verdict::Unaffected;
        }
        for (const auto& r : spec.regions) {
            if (r.kind == Region::Kind::Scalar && region_matches_position(r, disruption, prompt_length) &&
                r.dim.matches(disruption.scalar().dim) && r.lo <= delta && delta <= r.hi) {
                return r.verdict;
            }
        }
        return std::abs(delta) > spec.gibberish_threshold ? Verdict::Gibberish : Verdict::Unaffected;
    }
    const auto& lerp = disruption.anchor_lerp();
    for (const auto& r : spec.regions) {
        if (r.kind == Region::Kind::AnchorLerp && region_matches_position(r, disruption, prompt_length) &&
            r.anchor_token_id == lerp.anchor_token_id && r.lo <= lerp.fraction &&
            lerp.fraction <= r.hi) {
            return r.verdict;
        }
    }
    return Verdict::Unaffected;
}

Verdict lookup_verdict(const LandscapeSpec& spec, const std::vector<DisruptionSpec>& disruptions,
                       std::size_t prompt_length) {
    bool denial = false;
    for (const auto& d : disruptions) {
        const auto v = lookup_verdict(spec, d, prompt_length);
        if (v == Verdict::Gibberish) {
            return Verdict::Gibberish;
        }
        denial = denial || v == Verdict::Denial;
    }
    return denial ? Verdict::Denial : Verdict::Unaffected;
}

std::string_view reply_text(const LandscapeSpec& spec, Verdict v) {
    switch (v) {
        case Verdict::Denial:
            return kDenialText;
        case Verdict::Gibberish:
            return kGibberishText;
        case Verdict::Unaffected:
            return spec.base_reply;
    }
    return spec.base_reply;
}

GenerationResult simulate_generate(const TokenizedPrompt& prompt,
                                   const std::vector<DisruptionSpec>& disruptions,
                                   const LandscapeSpec& spec) {
    if (!prompt.prompt_id.empty() && prompt.prompt_id != spec.prompt_id &&
        (spec.prompt_text.empty() || spec.prompt_text != prompt.text)) {
        throw DataError("unknown prompt_id '" + prompt.prompt_id + "'");
    }
    const auto v = lookup_verdict(spec, disruptions, prompt.token_ids.size());
    GenerationResult out;
    out.text = std::string(reply_text(spec, v));
    std::istringstream words(out.text);
    std::string w;
    while (words >> w) {
        ++out.tokens_generated;
    }
    out.backend_id = "simlab";
    return out;
}

namespace {

bool overlaps(double lo, double hi, const std::vector<std::pair<double, double>>& taken,
              double gap) {
    return std::any_of(taken.begin(), taken.end(), [&](const auto& iv) {
        return lo < iv.second + gap && iv.first - gap < hi;
    });
}

std::size_t weighted_index(Rng& rng, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
        total += w;
    }
    double x = rng.uniform01() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (x < weights[i]) {
            return i;
        }
        x -= weights[i];
    }
    return weights.size() - 1;
}

}  // namespace

LandscapeSpec plant_landscape(LandscapeKind kind, std::uint64_t seed, const PlantOptions& options) {
    if (!(options.min_width > 0.0) || options.max_width < options.min_width ||
        options.min_intervals == 0 || options.max_intervals < options.min_intervals) {
        throw DataError("invalid planting options");
    }
    Rng rng(splitmix64(seed));
    LandscapeSpec spec;
    spec.prompt_id = options.prompt_id.empty() ? "planted-" + std::to_string(seed) : options.prompt_id;
    spec.prompt_text = options.prompt_text;
    spec.gibberish_threshold = options.gibberish_threshold;
    if (kind == LandscapeKind::Benign) {
        return spec;
    }

    if (options.coupling && !options.coupling->anchors.empty() &&
        !options.coupling->fractions.empty()) {
        const auto& c = *options.coupling;
        std::size_t ai = 0;
        if (c.anchor_index) {
            ai = *c.anchor_index;
        } else if (c.anchor_weights.size() == c.anchors.size()) {
            ai = weighted_index(rng, c.anchor_weights);
        } else {
            ai = rng.index(c.anchors.size());
        }
        const std::size_t fi = c.fraction_index ? *c.fraction_index : rng.index(c.fractions.size());
        if (ai >= c.anchors.size() || fi >= c.fractions.size()) {
            throw DataError("anchor coupling index out of range");
        }
        const double f = c.fractions[fi];
        Region r;
        r.kind = Region::Kind::AnchorLerp;
        r.position = {PositionSelector::Kind::Last, 0};
        r.anchor_token_id = c.anchors[ai];
        r.lo = std::max(f - c.half_width, 1e-6);
        r.hi = std::min(f + c.half_width, 1.0);
        r.verdict = Verdict::Denial;
        spec.regions.push_back(r);
    }

    const std::size_t count =
        options.min_intervals + rng.index(options.max_intervals - options.min_intervals + 1);
    std::vector<std::pair<double, double>> taken;
    const std::vector<std::pair<double, double>> forbidden = {{-options.zero_margin, options.zero_margin}};
    for (std::size_t attempt = 0; taken.size() < count && attempt < 10000; ++attempt) {
        const double width = rng.uniform(options.min_width, options.max_width);
        const double lo = round3(rng.uniform(options.placement_lo, options.placement_hi - width));
        const double hi = round3(lo + width);
        if (hi - lo < options.min_width || overlaps(lo, hi, forbidden, 0.0) ||
            overlaps(lo, hi, taken, options.min_gap)) {
            continue;
        }
        taken.emplace_back(lo, hi);
    }
    if (taken.empty()) {
        throw DataError("could not place any denial interval with the given options");
    }
    std::sort(taken.begin(), taken.end());
    for (const auto& [lo, hi] : taken) {
        Region r;
        r.kind = Region::Kind::Scalar;
        r.position = options.position;
        r.layer = options.layer;
        r.dim = options.dim;
        r.lo = lo;
        r.hi = hi;
        r.verdict = Verdict::Denial;
        spec.regions.push_back(r);
    }
    return spec;
}

std::string_view strip_boundary_marker(std::string_view token) {
    static constexpr std::string_view kSentencePiece = "\xE2\x96\x81";  // ▁
    static constexpr std::string_view kByteLevel = "\xC4\xA0";          // Ġ
    if (token.starts_with(kSentencePiece)) {
        return token.substr(kSentencePiece.size());
    }
    if (token.starts_with(kByteLevel)) {
        return token.substr(kByteLevel.size());
    }
    return token;
}

SimTokenizer::SimTokenizer(std::vector<std::string> vocab, TokenId unk_id)
    : vocab_(std::move(vocab)), unk_id_(unk_id) {
    if (vocab_.empty()) {
        throw DataError("simulated tokenizer needs a non-empty vocabulary");
    }
    if (unk_id_ >= vocab_.size()) {
        throw DataError("unk id out of range");
    }
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        const auto word = std::string(strip_boundary_marker(vocab_[i]));
        if (word.empty() || std::any_of(word.begin(), word.end(), [](char c) {
                return std::isspace(static_cast<unsigned char>(c)) != 0;
            })) {
            throw DataError("token " + std::to_string(i) + " is not a single word");
        }
        if (!lookup_.emplace(word, static_cast<TokenId>(i)).second) {
            throw DataError("tokens collide on word '" + word + "'");
        }
    }
}

std::vector<TokenId> SimTokenizer::tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) {
        const auto it = lookup_.find(w);
        ids.push_back(it == lookup_.end() ? unk_id_ : it->second);
    }
    return ids;
}

std::string SimTokenizer::detokenize(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab_.size()) {
            throw DataError("token id " + std::to_string(ids[i]) + " out of range");
        }
        if (i > 0) {
            out += ' ';
        }
        out += strip_boundary_marker(vocab_[ids[i]]);
    }
    return out;
}

SimBackend::SimBackend(SimModelConfig config, std::vector<LandscapeSpec> landscapes)
    : config_(std::move(config)), tokenizer_(config_.vocab) {
    for (auto& s : landscapes) {
        add_landscape(std::move(s));
    }
}

void SimBackend::add_landscape(LandscapeSpec spec) {
    spec.validate();
    if (!spec.prompt_text.empty()) {
        id_by_text_[tokenizer_.detokenize(tokenizer_.tokenize(spec.prompt_text))] = spec.prompt_id;
    }
    auto id = spec.prompt_id;
    by_id_.insert_or_assign(std::move(id), std::move(spec));
}

const LandscapeSpec& SimBackend::landscape_for(const TokenizedPrompt& prompt) const {
    if (const auto it = by_id_.find(prompt.prompt_id); it != by_id_.end()) {
        return it->second;
    }
    const auto text = tokenizer_.detokenize(prompt.token_ids);
    if (const auto it = id_by_text_.find(text); it != id_by_text_.end()) {
        return by_id_.at(it->second);
    }
    if (const auto it = by_id_.find("*"); it != by_id_.end()) {
        return it->second;
    }
    throw DataError("unknown prompt_id '" + prompt.prompt_id + "'");
}

GenerationResult SimBackend::generate(const TokenizedPrompt& prompt,
                                      const std::vector<DisruptionSpec>& disruptions,
                                      std::size_t max_new_tokens,
                                      std::optional<std::uint64_t> /*decode_seed*/) {
    if (!available_) {
        throw BackendError("simulated backend unavailable");
    }
    if (++calls_ > fail_after_) {
        throw BackendError("simulated backend failure");
    }
    if (prompt.token_ids.empty()) {
        throw DataError("token_ids must be non-empty");
    }
    const auto info = model_info();
    for (const auto& d : disruptions) {
        validate_disruption(d, prompt.token_ids.size(), info);
    }
    const auto& spec = landscape_for(prompt);
    const auto v = lookup_verdict(spec, disruptions, prompt.token_ids.size());
    GenerationResult out;
    out.backend_id = "simlab:" + config_.model_id;
    std::istringstream words{std::string(reply_text(spec, v))};
    std::string w;
    while (out.tokens_generated < max_new_tokens && words >> w) {
        if (!out.text.empty()) {
            out.text += ' ';
        }
        out.text += w;
        ++out.tokens_generated;
    }
    return out;
}

ModelInfo SimBackend::model_info() {
    if (!available_) {
        throw BackendError("simulated backend unavailable");
    }
    return {config_.model_id, config_.vocab.size(), config_.embedding_dim, config_.num_layers,
            config_.max_concurrency};
}

std::vector<TokenId> SimBackend::tokenize(const std::string& text) {
    if (!available_) {
        throw BackendError("simulated backend unavailable");
    }
    return tokenizer_.tokenize(text);
}

std::string SimBackend::detokenize(const std::vector<TokenId>& ids) {
    if (!available_) {
        throw BackendError("simulated backend unavailable");
    }
    return tokenizer_.detokenize(ids);
}

SimModelConfig sim_model_config_from_json(const json& j) {
    SimModelConfig c;
    try {
        c.model_id = j.value("model_id", c.model_id);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.num_layers = j.value("num_layers", c.num_layers);
        c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
        if (j.contains("vocab")) {
            c.vocab = j.at("vocab").get<std::vector<std::string>>();
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed simulated model config: ") + e.what());
    }
    return c;
}

json to_json(const SimModelConfig& config) {
    json j = {{"model_id", config.model_id},
              {"embedding_dim", config.embedding_dim},
              {"num_layers", config.num_layers},
              {"max_concurrency", config.max_concurrency}};
    if (!config.vocab.empty()) {
        j["vocab"] = config.vocab;
    }
    return j;
}

namespace {

std::string make_word(Rng& rng) {
    static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                   "p", "r", "s", "t", "v", "z", "ch", "st"};
    static constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
    const auto syllables = 2 + rng.index(2);
    std::string w;
    for (std::uint64_t s = 0; s < syllables; ++s) {
        w += kOnsets[rng.index(std::size(kOnsets))];
        w += kVowels[rng.index(std::size(kVowels))];
    }
    return w;
}

}  // namespace

SyntheticWorld make_world(std::uint64_t seed, const WorldOptions& options) {
    const std::size_t anchors = options.anchor_strings.size();
    if (options.dim <= anchors + 1 || options.vocab_size <= anchors + 2) {
        throw DataError("world too small for the requested anchors");
    }
    Rng rng(splitmix64(seed ^ 0xA5A5A5A5ULL));

    std::vector<std::string> vocab;
    vocab.push_back("<unk>");
    for (const auto& a : options.anchor_strings) {
        vocab.push_back(a);
    }
    std::set<std::string> used;
    for (const auto& v : vocab) {
        used.insert(std::string(strip_boundary_marker(v)));
    }
    std::vector<std::string> ordinary;
    while (vocab.size() < options.vocab_size) {
        auto w = make_word(rng);
        if (used.insert(w).second) {
            ordinary.push_back(w);
            vocab.push_back(std::move(w));
        }
    }

    std::vector<float> rows(options.vocab_size * options.dim, 0.0f);
    std::vector<TokenId> anchor_ids;
    for (std::size_t t = 0; t < options.vocab_size; ++t) {
        float* row = rows.data() + t * options.dim;
        if (t >= 1 && t <= anchors) {
            row[t - 1] = static_cast<float>(options.anchor_scale);
            anchor_ids.push_back(static_cast<TokenId>(t));
            continue;
        }
        double sq = 0.0;
        for (std::size_t j = anchors; j < options.dim; ++j) {
            const double v = rng.normal();
            row[j] = static_cast<float>(v);
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        for (std::size_t j = anchors; j < options.dim; ++j) {
            row[j] = static_cast<float>(row[j] / norm);
        }
    }

    SyntheticWorld world{
        EmbeddingMatrix(options.model_id, options.vocab_size, options.dim, std::move(rows), vocab),
        SimModelConfig{options.model_id, options.dim, options.num_layers, 4, vocab},
        std::move(anchor_ids),
        std::move(ordinary),
    };
    return world;
}

std::string SyntheticWorld::random_prompt(std::uint64_t seed, const WorldOptions& options) const {
    Rng rng(splitmix64(seed ^ 0x5EED5EEDULL));
    const auto n = options.words_per_prompt_min +
                   rng.index(options.words_per_prompt_max - options.words_per_prompt_min + 1);
    std::string text;
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            text += ' ';
        }
        text += ordinary_words[rng.index(ordinary_words.size())];
    }
    return text;
}

SimBundle load_sim_bundle(const std::filesystem::path& path) {
    const auto j = parse_json_file(path);
    SimBundle bundle;
    bundle.model = sim_model_config_from_json(j.value("model", json::object()));
    for (const auto& item : j.value("landscapes", json::array())) {
        bundle.landscapes.push_back(landscape_from_json(item));
    }
    return bundle;
}

void write_sim_bundle(const SimBundle& bundle, const std::filesystem::path& path) {
    json list = json::array();
    for (const auto& s : bundle.landscapes) {
        list.push_back(to_json(s));
    }
    write_text(path, json{{"model", to_json(bundle.model)}, {"landscapes", list}}.dump(1) + "\n");
}

}  // namespace retrig::simlab
