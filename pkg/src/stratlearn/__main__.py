from stratlearn.cli import main

main()
