#include <stdio.h>
#include <string.h>

#include "ctxpaste.h"

static int check(CpStatus s, const char *what) {
    if (s != CP_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, cp_last_error());
        return 1;
    }
    return 0;
}

int main(void) {
    CpCorpus *corpus = NULL;
    CpBank *bank = NULL;
    CpCorpus *augmented = NULL;
    uint8_t labels[8];
    size_t n = 0;
    double score = 0.0;
    uint8_t a[4] = {0, 1, 1, 0};

    if (check(cp_corpus_synth(NULL, 40, 7, &corpus), "synth")) return 1;
    if (check(cp_bank_harvest_gt(corpus, 0.1, 0.7, true, &bank), "harvest")) return 1;
    if (check(cp_augment(corpus, bank, "{\"objects_per_image\": 1}", 3, &augmented), "augment")) return 1;
    if (check(cp_corpus_labels(augmented, 0, labels, sizeof labels, &n), "labels")) return 1;
    if (n < 2) {
        fprintf(stderr, "augmented sample has %zu labels\n", n);
        return 1;
    }
    if (check(cp_miou(a, a, 2, 2, 1, &score), "miou")) return 1;
    if (cp_bank_harvest_gt(corpus, 0.9, 0.95, true, &bank) != CP_STATUS_EMPTY_BANK) {
        fprintf(stderr, "expected an empty bank\n");
        return 1;
    }
    printf("%zu %zu %zu %.1f\n", cp_corpus_len(corpus), cp_corpus_len(augmented), n, score);
    cp_corpus_free(augmented);
    cp_bank_free(bank);
    cp_corpus_free(corpus);
    return 0;
}
