#include "dpl/prompt_template.hpp"

#include <fstream>
#include <sstream>

#include "dpl/error.hpp"

namespace dpl::prompts {

Template load_template(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open template file: " + file.string());

    Template tmpl;
    std::string* section = nullptr;
    bool saw_system = false;
    bool saw_user = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line == "[system]") {
            section = &tmpl.system;
            saw_system = true;
            continue;
        }
        if (line == "[user]") {
            section = &tmpl.user;
            saw_user = true;
            continue;
        }
        if (!section) {
            if (line.empty()) continue;
            throw ConfigError("template " + file.string() +
                              ": content before the first section marker");
        }
        section->append(line);
        section->push_back('\n');
    }
    if (!saw_system || !saw_user)
        throw ConfigError("template " + file.string() +
                          ": both [system] and [user] sections are required");
    // Drop the trailing newline the line loop appends.
    if (!tmpl.system.empty() && tmpl.system.back() == '\n') tmpl.system.pop_back();
    if (!tmpl.user.empty() && tmpl.user.back() == '\n') tmpl.user.pop_back();
    return tmpl;
}

std::string render(std::string_view text,
                   const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c != '{') {
            if (c == '}') throw Error("template: unmatched '}'");
            out.push_back(c);
            ++i;
            continue;
        }
        std::size_t close = text.find('}', i + 1);
        if (close == std::string_view::npos)
            throw Error("template: unmatched '{'");
        std::string name(text.substr(i + 1, close - i - 1));
        auto it = values.find(name);
        if (it == values.end())
            throw Error("template: no value for placeholder {" + name + "}");
        out += it->second;
        i = close + 1;
    }
    return out;
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
    TemplateSet set;
    set.difference_extractor = load_template(dir / "difference_extractor.txt");
    set.summarizer = load_template(dir / "summarizer.txt");
    set.history_summarizer = load_template(dir / "history_summarizer.txt");
    set.recurrent_summarizer = load_template(dir / "recurrent_summarizer.txt");
    set.contrastive_summarizer = load_template(dir / "contrastive_summarizer.txt");
    set.generator = load_template(dir / "generator.txt");
    set.judge = load_template(dir / "judge.txt");
    return set;
}

}  // namespace dpl::prompts
