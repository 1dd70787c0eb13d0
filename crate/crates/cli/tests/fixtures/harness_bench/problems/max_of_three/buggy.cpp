int max_of_three(int a, int b, int c) {
    int m = a;
    if (b > m) m = b;
    if (c > a) m = c;
    return m;
}
