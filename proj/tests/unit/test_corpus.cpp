#include <sstream>

#include "ciodetect/corpus.hpp"
#include "ciodetect/error.hpp"
#include "doctest.h"

using namespace ciod;

namespace {
const char* kSmall =
    R"({"kind":"profile","account_id":"a1","verified":false,"description":"","statuses_count":812,"created_at":1600000000,"collected_at":1617000000,"extra_flags":[0,0]})"
    "\n"
    R"({"kind":"profile","account_id":"a2","verified":true,"description":"news","statuses_count":10,"created_at":1600000000,"collected_at":1617000000,"extra_flags":[1,0]})"
    "\n"
    R"({"kind":"message","message_id":"m1","account_id":"a1","timestamp":1612000000,"text":"hello #X","client":"Twitter Web App","is_retweet":false})"
    "\n"
    R"({"kind":"message","message_id":"m2","account_id":"a2","timestamp":1612000001,"text":"hi","client":"Bot","is_retweet":true})"
    "\n"
    R"({"kind":"message","message_id":"m3","account_id":"a1","timestamp":1612000002,"text":"again","client":"Twitter for iPhone","is_retweet":false})"
    "\n";
}

TEST_CASE("parse a small corpus") {
  std::istringstream in(kSmall);
  const Corpus c = parse_corpus(in);
  CHECK(c.num_accounts() == 2);
  CHECK(c.messages.size() == 3);
  CHECK(c.profiles.at("a2").extra_flags == std::vector<int>{1, 0});
  CHECK(c.messages[1].is_retweet);
}

TEST_CASE("empty corpus") {
  std::istringstream in("");
  const Corpus c = parse_corpus(in);
  CHECK(c.num_accounts() == 0);
  CHECK(c.messages.empty());
}

TEST_CASE("schema errors carry the line number") {
  auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_corpus(in);
    } catch (const SchemaError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  const std::string profile =
      R"({"kind":"profile","account_id":"a1","verified":false,"description":"","statuses_count":1,"created_at":0,"collected_at":5})";
  const std::string orphan =
      R"({"kind":"message","message_id":"m1","account_id":"zz","timestamp":1,"text":"t","client":"c","is_retweet":false})";
  CHECK(line_of(profile + "\n" + orphan + "\n") == 2);
  const std::string msg =
      R"({"kind":"message","message_id":"m1","account_id":"a1","timestamp":1,"text":"t","client":"c","is_retweet":false})";
  CHECK(line_of(profile + "\n" + msg + "\n" + msg + "\n") == 3);
  CHECK(line_of(R"({"kind":"profile","account_id":"a1"})") == 1);
  CHECK(line_of(R"({"kind":"tweet"})") == 1);
  CHECK(line_of("not json") == 1);
  const std::string bad_time =
      R"({"kind":"profile","account_id":"a1","verified":false,"description":"","statuses_count":1,"created_at":10,"collected_at":5})";
  CHECK(line_of(bad_time) == 1);
}

TEST_CASE("a profile may follow its messages") {
  const std::string text =
      R"({"kind":"message","message_id":"m1","account_id":"a1","timestamp":1,"text":"t","client":"c","is_retweet":false})"
      "\n"
      R"({"kind":"profile","account_id":"a1","verified":false,"description":"","statuses_count":1,"created_at":0,"collected_at":5})"
      "\n";
  std::istringstream in(text);
  CHECK(parse_corpus(in).messages.size() == 1);
}

TEST_CASE("round trip and determinism") {
  std::istringstream in(kSmall);
  const Corpus c = parse_corpus(in);
  std::ostringstream out;
  write_corpus(c, out);
  std::istringstream again(out.str());
  const Corpus d = parse_corpus(again);
  CHECK(c == d);
  std::ostringstream out2;
  write_corpus(d, out2);
  CHECK(out.str() == out2.str());
}

TEST_CASE("missing file") { CHECK_THROWS_AS(load_corpus("/nonexistent/corpus.jsonl"), IoError); }
